"""What a frame looks like on the wire."""
import numpy as np

from dison.transport import GlobalParams, PredictedClass, decode, encode

frame = encode(PredictedClass(2))
print("PredictedClass(2):", frame.hex(" "))
print("  magic", frame[:4], "version", int.from_bytes(frame[4:6], "little"), "type", frame[6],
      "length", int.from_bytes(frame[7:11], "little"))

msg = GlobalParams(3, np.array([0.5, -1.25], np.float32), source_converged=True)
frame = encode(msg)
print("GlobalParams(3, [0.5, -1.25], True):", frame.hex(" "))
print("decodes back to an equal message:", decode(frame) == msg)

corrupt = bytearray(frame)
corrupt[-1] ^= 1
try:
    decode(corrupt)
except Exception as exc:
    print("flipping one checksum bit ->", type(exc).__name__)
