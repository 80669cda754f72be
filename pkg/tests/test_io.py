import struct

import cv2
import numpy as np
import pytest

from sfrefine import io
from sfrefine.refiner import init_params
from sfrefine.synth import make_dataset


def test_pfm_roundtrip_bit_exact(tmp_path, rng):
    for shape in ((5, 7), (4, 6, 3)):
        a = rng.normal(size=shape).astype(np.float32)
        io.write_pfm(tmp_path / "a.pfm", a)
        b = io.read_pfm(tmp_path / "a.pfm")
        assert b.dtype == np.float32 and b.tobytes() == a.tobytes()


def test_pfm_row_order_and_endianness(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], np.float32)
    io.write_pfm(tmp_path / "a.pfm", a)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 3\n-1.0\n")
    # first stored row is the bottom image row, little-endian
    assert raw[-24:-16] == struct.pack("<2f", 5.0, 6.0)
    big = b"Pf\n2 3\n1.0\n" + np.flipud(a).astype(">f4").tobytes()
    (tmp_path / "b.pfm").write_bytes(big)
    assert np.array_equal(io.read_pfm(tmp_path / "b.pfm"), a)


def test_pfm_errors(tmp_path):
    io.write_pfm(tmp_path / "c.pfm", np.zeros((2, 2, 3), np.float32))
    with pytest.raises(io.FormatError, match="1-channel"):
        io.read_pfm(tmp_path / "c.pfm", channels=1)
    (tmp_path / "bad.pfm").write_bytes(b"P6\n2 2\n255\n")
    with pytest.raises(io.FormatError, match="header"):
        io.read_pfm(tmp_path / "bad.pfm")
    (tmp_path / "short.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + b"\0" * 8)
    with pytest.raises(io.FormatError, match="truncated"):
        io.read_pfm(tmp_path / "short.pfm")
    with pytest.raises(io.FormatError):
        io.write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))


def test_flo_roundtrip_and_errors(tmp_path, rng):
    f = rng.normal(size=(2, 5, 6)).astype(np.float32)
    p = tmp_path / "f.flo"
    io.write_flo(p, f)
    assert io.read_flo(p).tobytes() == f.tobytes()
    raw = p.read_bytes()
    assert struct.unpack("<fii", raw[:12]) == (202021.25, 6, 5)
    assert struct.unpack("<2f", raw[12:20]) == (f[0, 0, 0], f[1, 0, 0])  # interleaved u, v
    (tmp_path / "m.flo").write_bytes(struct.pack("<fii", 1.0, 6, 5) + raw[12:])
    with pytest.raises(io.FormatError, match="m.flo"):
        io.read_flo(tmp_path / "m.flo")
    (tmp_path / "z.flo").write_bytes(struct.pack("<fii", 202021.25, 0, 0))
    with pytest.raises(io.FormatError):
        io.read_flo(tmp_path / "z.flo")
    (tmp_path / "t.flo").write_bytes(raw[:-4])
    with pytest.raises(io.FormatError, match="size"):
        io.read_flo(tmp_path / "t.flo")
    with pytest.raises(io.FormatError):
        io.write_flo(tmp_path / "e.flo", np.zeros((2, 0, 3)))


def test_kitti_disparity(tmp_path):
    raw = np.array([[12800, 0], [256, 65535]], np.uint16)
    cv2.imwrite(str(tmp_path / "d.png"), raw)
    d, valid = io.read_kitti_disp_png(tmp_path / "d.png")
    assert d[0, 0] == 50.0 and d[1, 0] == 1.0 and not valid[0, 1] and valid[1, 1]
    io.write_kitti_disp_png(tmp_path / "e.png", d, valid)
    assert np.array_equal(cv2.imread(str(tmp_path / "e.png"), cv2.IMREAD_UNCHANGED), raw)


def test_kitti_flow(tmp_path):
    u = np.array([[2 ** 15, 2 ** 15 + 64]], np.uint16)
    v = np.array([[2 ** 15 - 128, 2 ** 15]], np.uint16)
    ok = np.array([[1, 0]], np.uint16)
    cv2.imwrite(str(tmp_path / "f.png"), np.dstack([ok, v, u]))  # BGR on disk
    f, valid = io.read_kitti_flow_png(tmp_path / "f.png")
    assert f[0, 0, 0] == 0.0 and f[0, 0, 1] == 1.0 and f[1, 0, 0] == -2.0
    assert valid.tolist() == [[True, False]]
    io.write_kitti_flow_png(tmp_path / "g.png", f, valid)
    assert np.array_equal(cv2.imread(str(tmp_path / "g.png"), cv2.IMREAD_UNCHANGED),
                          cv2.imread(str(tmp_path / "f.png"), cv2.IMREAD_UNCHANGED))


def test_kitti_rejects_wrong_depth_and_channels(tmp_path):
    cv2.imwrite(str(tmp_path / "8.png"), np.zeros((3, 3), np.uint8))
    with pytest.raises(io.FormatError, match="16-bit"):
        io.read_kitti_disp_png(tmp_path / "8.png")
    cv2.imwrite(str(tmp_path / "3.png"), np.zeros((3, 3, 3), np.uint16))
    with pytest.raises(io.FormatError, match="channel"):
        io.read_kitti_disp_png(tmp_path / "3.png")
    cv2.imwrite(str(tmp_path / "1.png"), np.zeros((3, 3), np.uint16))
    with pytest.raises(io.FormatError, match="channel"):
        io.read_kitti_flow_png(tmp_path / "1.png")


def test_kitti_random_roundtrip(tmp_path, rng):
    raw = rng.integers(0, 65536, (6, 7), dtype=np.uint16)
    cv2.imwrite(str(tmp_path / "r.png"), raw)
    d, valid = io.read_kitti_disp_png(tmp_path / "r.png")
    io.write_kitti_disp_png(tmp_path / "s.png", d, valid)
    assert np.array_equal(cv2.imread(str(tmp_path / "s.png"), cv2.IMREAD_UNCHANGED), raw)


def test_8bit_image(tmp_path):
    from PIL import Image
    Image.fromarray(np.array([[0, 255], [51, 102]], np.uint8)).save(tmp_path / "i.png")
    img = io.read_image(tmp_path / "i.png")
    assert img.shape == (1, 2, 2) and img[0, 0, 1] == 1.0 and img[0, 1, 0] == 0.2


def test_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("")
    assert io.load_config(p) == io.RunConfig()
    d = io.RunConfig()
    assert (d.omega_pd, d.omega_pf, d.omega_df, d.omega_s) == (1, 1, 1, 0.1)
    assert (d.w1, d.w2, d.steps, d.beta1, d.beta2, d.lr) == (0.01, 0.05, 5, 0.9, 0.999, 1e-4)
    p.write_text("# tweak\nomega_s = 0.2\n")
    assert io.load_config(p) == io.RunConfig(omega_s=0.2)
    p.write_text("steps = 3\nomega_sx = 1\n")
    with pytest.raises(ValueError, match=r"c.cfg:2: unknown key 'omega_sx'"):
        io.load_config(p)
    p.write_text("steps\n")
    with pytest.raises(ValueError, match=":1:"):
        io.load_config(p)
    p.write_text("width = wide\n")
    with pytest.raises(ValueError, match=":1: bad value"):
        io.load_config(p)
    p.write_text("mode = selfsup\nsupervise_d2 = true\n")
    cfg = io.load_config(p)
    assert cfg.train_config().mode == "selfsup" and cfg.train_config().supervise_d2
    p.write_text("mode = both\n")
    with pytest.raises(ValueError):
        io.load_config(p)


def test_params_roundtrip(tmp_path):
    params = init_params(6, seed=3, zero_final=False)
    p = tmp_path / "p.bin"
    io.save_params(p, params)
    back = io.load_params(p)
    for a, b in zip(params.arrays(), back.arrays()):
        assert np.array_equal(a.astype(np.float32), b)
    raw = p.read_bytes()
    assert raw[:4] == b"SFRF" and struct.unpack("<II", raw[4:12]) == (1, 3)
    assert len(raw) == 12 + 3 * 16 + 4 * params.num_parameters()
    (tmp_path / "q.bin").write_bytes(raw[:-4])
    with pytest.raises(io.FormatError):
        io.load_params(tmp_path / "q.bin")
    (tmp_path / "r.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(io.FormatError):
        io.load_params(tmp_path / "r.bin")


def test_sample_directory_roundtrip(tmp_path):
    s = make_dataset(1, seed=0)[0]
    io.save_sample(tmp_path / "000", s)
    clip = io.load_clip(tmp_path / "000")
    assert np.array_equal(clip.l1, s.clip.l1.astype(np.float32))
    gt, valid = io.load_ground_truth(tmp_path / "000")
    assert np.array_equal(gt.flow, s.gt.flow.astype(np.float32)) and valid.all()
    assert np.array_equal(io.read_mask(tmp_path / "000" / "occlusion.png"), s.occlusion)


def test_atomic_write_leaves_no_temp(tmp_path):
    io.atomic_write_bytes(tmp_path / "x", b"abc")
    assert [p.name for p in tmp_path.iterdir()] == ["x"]
