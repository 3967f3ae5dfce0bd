"""Run a model and tensor file through onnxruntime and write the outputs
in the preq tensor document format.

    python3 ort_check.py fig1.onnx fig1_input.json fig1_onnxruntime_output.json
"""
import json
import sys

import numpy as np
import onnx
import onnxruntime as ort

DTYPES = {"int8": np.int8, "uint8": np.uint8, "int32": np.int32, "float32": np.float32, "float16": np.float16}
NAMES = {np.dtype(v): k for k, v in DTYPES.items()}


def main(model_path, input_path, output_path):
    onnx.checker.check_model(onnx.load(model_path), full_check=True)
    docs = json.load(open(input_path))
    if isinstance(docs, dict):
        docs = [docs]
    feeds = {d["name"]: np.array(d["data"], dtype=DTYPES[d["dtype"]]).reshape(d["shape"]) for d in docs}
    sess = ort.InferenceSession(model_path, providers=["CPUExecutionProvider"])
    names = [o.name for o in sess.get_outputs()]
    outs = sess.run(names, feeds)
    lines = [
        json.dumps({"name": n, "dtype": NAMES[o.dtype], "shape": list(o.shape), "data": o.flatten().tolist()})
        for n, o in zip(names, outs)
    ]
    with open(output_path, "w") as f:
        f.write("[\n  " + ",\n  ".join(lines) + "\n]\n")
    print(f"onnxruntime {ort.__version__}: wrote {output_path}")


if __name__ == "__main__":
    main(*sys.argv[1:4])
