"""Smoke test for the convllava extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/convllava-*.whl
"""

import math
import struct
import tempfile
from pathlib import Path

import convllava


def write_ppm(path, width, height, rgb):
    header = f"P6\n{width} {height}\n255\n".encode()
    path.write_bytes(header + bytes(rgb) * (width * height))


def main():
    assert convllava.token_count("vit", 336, 336) == 576
    assert convllava.token_count("convnext5", 1536, 1536) == 576
    try:
        convllava.token_count("vit", 1024, 1024)
    except ValueError as e:
        assert "14" in str(e)
    else:
        raise AssertionError("1024 is not a multiple of 14")

    vit = convllava.flops("vit", 672, 672)
    c4 = convllava.flops("convnext4", 672, 672)
    ratio = vit["total"] / c4["total"]
    assert 5 <= ratio <= 10, ratio
    assert vit["total"] == vit["encoder"] + vit["llm_prefill"]

    csv = convllava.curves_csv(["convnext4"], [768])
    assert csv.splitlines()[1].startswith("convnext4,768,576,")

    assert convllava.cosine_lr(1000, 1000, 2e-5) == 0.0
    assert math.isclose(convllava.cosine_lr(30, 1000, 2e-5), 2e-5)

    with tempfile.TemporaryDirectory() as d:
        img = Path(d) / "wide.ppm"
        write_ppm(img, 200, 100, (20, 120, 220))
        shape, data = convllava.preprocess(str(img), 128, mode="short_side", factor=64)
        assert shape == [1, 3, 128, 256], shape
        assert len(data) == math.prod(shape)

        enc = convllava.Encoder("toy5", seed=0)
        tokens, gh, gw = enc.encode(data, shape[2], shape[3])
        assert (gh, gw) == (2, 4)
        assert len(tokens) == gh * gw * enc.channels
        assert all(math.isfinite(v) for v in tokens)

        # One-entry checkpoint written by hand, then inspected.
        ck = Path(d) / "w.ckpt"
        name = b"w"
        body = struct.pack("<I", len(name)) + name + bytes([0]) + struct.pack("<II", 1, 2) + struct.pack("<ff", 1.5, -2.0)
        ck.write_bytes(b"CVLV" + struct.pack("<II", 1, 1) + body)
        assert convllava.inspect_checkpoint(str(ck)) == [("w", "f32", [2])]

    assert convllava.gradcheck(7) < 1e-5
    assert convllava.equivariance("toy5", 0, 64) < 1e-5
    print("python smoke test OK:", repr(enc))


if __name__ == "__main__":
    main()
