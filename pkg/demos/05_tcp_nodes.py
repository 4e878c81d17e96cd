"""The two nodes as separate endpoints on a real socket.

The source node listens, the target node dials; each runs its own state
machine and only frames defined in docs/protocol.md cross the connection.
In a real deployment these would be two processes (see `dison run --transport
tcp --role ...`); threads keep the demo self-contained.
"""
import threading

from _common import small_benchmark

from dison import nn
from dison.data import AugmentPolicy
from dison.isolation import ConvergenceConfig
from dison.protocol import RoundPlan, SourceNode, TargetNode
from dison.transport import TcpListener, tcp_dial

spec, pretrained, train, _, ood_test = small_benchmark()
plan = RoundPlan(max_rounds=50, class_conditional=True).resolved(len(train))
args = (plan, ConvergenceConfig(), nn.OptimizerState("sgd", 0.01), AugmentPolicy(), (0, 0))

listener = TcpListener(("127.0.0.1", 0))
host, port = listener.address
logs = {}


def source():
    with listener.accept() as ep:
        logs["source"] = SourceNode(spec, pretrained, train, *args).run(ep)


t = threading.Thread(target=source)
t.start()
with tcp_dial(listener.address) as ep:
    logs["target"] = TargetNode(spec, pretrained, ood_test.x[0], *args).run(ep)
t.join()
listener.close()

tgt = logs["target"]
print(f"source node listened on {host}:{port}")
print(f"score R = {tgt.score}, frames sent by target: {[m for m, _ in tgt.sent][:3]} ... {tgt.sent[-1][0]}")
print(f"both sides agree on every global model: {logs['source'].checksums == tgt.checksums}")
