import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from tdt import cli
from tdt import io as tdt_io
from tdt.gradients import GradOptions, tdt_loss_and_grad
from tdt.lattice import tdt_loss
from tdt.synth import APPENDIX_D, sample_problem

from conftest import random_problem, uniform_problem


def as_f32(problem):
    # what survives a trip through the f32 payload
    return problem.with_logits(problem.logits.astype(np.float32).astype(np.float64))


class TestProblemFile:
    def test_round_trip_default(self, tmp_path):
        p = as_f32(sample_problem(APPENDIX_D))
        path = tmp_path / "p.tdtp"
        tdt_io.write_problem(p, path)
        q = tdt_io.read_problem(path)
        assert np.array_equal(p.logits, q.logits)
        assert np.array_equal(p.targets, q.targets)
        assert list(q.durations) == list(range(8))
        assert q.V == 5
        tdt_io.write_problem(q, tmp_path / "q.tdtp")
        assert path.read_bytes() == (tmp_path / "q.tdtp").read_bytes()

    def test_layout(self):
        p = uniform_problem(1, 1, 2, [0, 3], targets=[1])
        buf = tdt_io.problem_to_bytes(p)
        assert buf[:4] == b"TDTP"
        assert struct.unpack_from("<5I", buf, 4) == (1, 1, 1, 2, 2)
        assert struct.unpack_from("<3I", buf, 24) == (0, 3, 1)
        assert len(buf) == 36 + 4 * 1 * 2 * 5

    def test_bad_magic(self):
        buf = b"XXXX" + tdt_io.problem_to_bytes(uniform_problem(1, 0, 1, [1]))[4:]
        with pytest.raises(tdt_io.BadMagicError) as info:
            tdt_io.problem_from_bytes(buf)
        assert info.value.code == 11

    def test_truncated_payload(self):
        buf = tdt_io.problem_to_bytes(as_f32(sample_problem(APPENDIX_D)))
        with pytest.raises(tdt_io.SizeMismatchError) as info:
            tdt_io.problem_from_bytes(buf[:-4])
        assert info.value.code == 12

    def test_truncated_header(self):
        with pytest.raises(tdt_io.SizeMismatchError):
            tdt_io.problem_from_bytes(b"TDTP\x01\x00")

    def test_target_out_of_range(self):
        buf = bytearray(tdt_io.problem_to_bytes(uniform_problem(1, 1, 2, [1], targets=[1])))
        struct.pack_into("<I", buf, 28, 7)
        with pytest.raises(tdt_io.InvalidProblemError) as info:
            tdt_io.problem_from_bytes(bytes(buf))
        assert info.value.code == 13

    def test_unsorted_durations(self):
        buf = bytearray(tdt_io.problem_to_bytes(uniform_problem(1, 0, 1, [1, 2])))
        struct.pack_into("<2I", buf, 24, 2, 1)
        with pytest.raises(tdt_io.InvalidProblemError):
            tdt_io.problem_from_bytes(bytes(buf))

    def test_unsupported_version(self):
        buf = bytearray(tdt_io.problem_to_bytes(uniform_problem(1, 0, 1, [1])))
        struct.pack_into("<I", buf, 4, 9)
        with pytest.raises(tdt_io.UnsupportedVersionError) as info:
            tdt_io.problem_from_bytes(bytes(buf))
        assert info.value.code == 14

    def test_distinct_codes(self):
        codes = [c.code for c in (tdt_io.BadMagicError, tdt_io.SizeMismatchError,
                                  tdt_io.InvalidProblemError, tdt_io.UnsupportedVersionError)]
        assert len(set(codes)) == 4


class TestTensorFile:
    def test_round_trip(self, tmp_path, rng):
        x = rng.standard_normal((3, 4, 5))
        tdt_io.write_tensor(x, tmp_path / "x.tdtt")
        y = tdt_io.read_tensor(tmp_path / "x.tdtt")
        assert np.array_equal(x, y)

    def test_scalar_and_errors(self):
        assert tdt_io.tensor_from_bytes(tdt_io.tensor_to_bytes(np.float64(2.5))) == 2.5
        buf = tdt_io.tensor_to_bytes(np.zeros((2, 2)))
        with pytest.raises(tdt_io.SizeMismatchError):
            tdt_io.tensor_from_bytes(buf + b"\0")
        with pytest.raises(tdt_io.BadMagicError):
            tdt_io.tensor_from_bytes(b"TDTP" + buf[4:])


@pytest.fixture
def ln2_file(tmp_path):
    path = tmp_path / "ln2.tdtp"
    tdt_io.write_problem(uniform_problem(1, 0, 1, [1]), path)
    return path


@pytest.fixture
def random_file(tmp_path, rng):
    p = as_f32(random_problem(rng, T=4, U=2, V=3, durations=[0, 1, 2]))
    path = tmp_path / "rand.tdtp"
    tdt_io.write_problem(p, path)
    return path, p


class TestCli:
    def test_loss_ln2(self, ln2_file, capsys):
        assert cli.main(["loss", "--problem", str(ln2_file)]) == 0
        assert capsys.readouterr().out == "0.693147180560\n"

    def test_loss_matches_library(self, random_file, capsys):
        path, p = random_file
        cli.main(["loss", "--problem", str(path), "--sigma", "0.05"])
        assert float(capsys.readouterr().out) == pytest.approx(tdt_loss(p, 0.05), rel=1e-11)

    def test_grad_writes_tensors(self, random_file, tmp_path, capsys):
        path, p = random_file
        out = tmp_path / "g"
        assert cli.main(["grad", "--problem", str(path), "--sigma", "0.02", "--out", str(out)]) == 0
        ref = tdt_loss_and_grad(p, GradOptions(sigma=0.02))
        assert np.array_equal(tdt_io.read_tensor(out / "token_grad.tdtt"), ref.token_logit_grad)
        assert np.array_equal(tdt_io.read_tensor(out / "duration_grad.tdtt"), ref.duration_logit_grad)

    @pytest.mark.parametrize("extra", [[], ["--rnnt"], ["--sigma", "0.05"]])
    def test_gradcheck_passes(self, random_file, capsys, extra):
        path, _ = random_file
        assert cli.main(["gradcheck", "--problem", str(path), "--h", "1e-4", "--tol", "1e-6"] + extra) == 0
        assert "max relative error" in capsys.readouterr().out

    def test_gradcheck_fails_on_tight_tolerance(self, random_file, capsys):
        path, _ = random_file
        assert cli.main(["gradcheck", "--problem", str(path), "--h", "1e-2", "--tol", "1e-12"]) == 1

    def test_decode(self, random_file, capsys):
        path, _ = random_file
        assert cli.main(["decode", "--problem", str(path), "--stats"]) == 0
        lines = capsys.readouterr().out.splitlines()
        result, stats = json.loads(lines[0]), json.loads(lines[1])
        assert {"hypothesis", "steps", "durations"} <= result.keys()
        assert stats["blank_count"] == result["blank_count"]

    def test_decode_unlimited_guard(self, tmp_path, capsys):
        p = uniform_problem(4, 1, 2, [1], targets=[0])
        logits = p.logits.copy()
        logits[..., 2] = 1.0  # blank wins everywhere
        path = tmp_path / "blank.tdtp"
        tdt_io.write_problem(p.with_logits(logits), path)
        assert cli.main(["decode", "--problem", str(path), "--rnnt", "--max-symbols", "0"]) == 0
        assert json.loads(capsys.readouterr().out)["steps"] == 4

    def test_align(self, random_file, tmp_path):
        path, p = random_file
        out = tmp_path / "a"
        assert cli.main(["align", "--problem", str(path), "--out", str(out)]) == 0
        rows = (out / "alignment.csv").read_text().splitlines()
        assert len(rows) == p.T
        assert (out / "alignment.pgm").read_bytes().startswith(b"P5\n3 4\n255\n")

    def test_experiment(self, tmp_path, capsys):
        out = tmp_path / "exp"
        argv = ["experiment", "--preset", "appendix-d", "--T", "12", "--U", "3", "--durations", "0-2",
                "--steps", "5", "--out", str(out)]
        assert cli.main(argv) == 0
        names = {"config.json", "loss.csv", "alignment.csv", "alignment.pgm", "decode.json", "durations.csv"}
        assert names <= {f.name for f in out.iterdir()}
        cfg = json.loads((out / "config.json").read_text())
        assert (cfg["T"], cfg["U"], cfg["N_d"], cfg["steps"]) == (12, 3, 3, 5)
        assert json.loads(capsys.readouterr().out)["T"] == 12

    def test_missing_file_exits_one(self, tmp_path, capsys):
        assert cli.main(["loss", "--problem", str(tmp_path / "nope")]) == 1
        assert "error" in capsys.readouterr().err

    def test_bad_file_exits_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.tdtp"
        bad.write_bytes(b"XXXX")
        assert cli.main(["loss", "--problem", str(bad)]) == 1
        assert "BadMagicError" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["frobnicate"])
        assert info.value.code == 2

    def test_unknown_flag(self, ln2_file):
        with pytest.raises(SystemExit) as info:
            cli.main(["loss", "--problem", str(ln2_file), "--bogus"])
        assert info.value.code == 2

    def test_module_entry_point(self, ln2_file):
        proc = subprocess.run([sys.executable, "-m", "tdt", "loss", "--problem", str(ln2_file)],
                              capture_output=True, text=True, check=True)
        assert proc.stdout == "0.693147180560\n"
