"""Shared setup for the demos: a small benchmark and a trained primary model."""
from dison import nn
from dison.data import SyntheticConfig, generate
from dison.pretrain import PretrainConfig, pretrain


def small_benchmark(seed=0):
    train, id_test, ood_test = generate(SyntheticConfig(seed=seed))
    spec = nn.preset("base", train.patch_size ** 2, seed=seed)
    pretrained, log = pretrain(PretrainConfig(spec, seed=seed), train)
    print(f"primary model: train accuracy {log[-1]['accuracy']:.3f} after {len(log)} epochs")
    return spec, pretrained, train, id_test, ood_test
