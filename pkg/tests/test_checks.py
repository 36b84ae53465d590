import numpy as np
import pytest

from sanet.checks import OP_CHECKS, OP_NAMES, PRECISIONS, random_maps, run_op_check, run_suite
from sanet.errors import ConfigurationError
from sanet.superpixel import validate_map


class TestOpChecks:
    @pytest.mark.parametrize("check", OP_CHECKS, ids=lambda c: c.name)
    def test_f64_quick(self, check):
        rep = run_op_check(check, trials=5, precision="f64", seed=11)
        assert rep.passed, rep.lines()
        assert rep.worst < PRECISIONS["f64"][2]

    @pytest.mark.parametrize("name", ["conv2d", "batchnorm_train", "sp_avg_pool", "total_loss"])
    def test_f32_quick(self, name):
        check = next(c for c in OP_CHECKS if c.name == name)
        assert run_op_check(check, trials=5, precision="f32", seed=2).passed


class TestSuite:
    def test_names(self):
        assert OP_NAMES[-1] == "end_to_end" and len(set(OP_NAMES)) == len(OP_NAMES)

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            run_suite(["softmax"], trials=1)
        with pytest.raises(ConfigurationError):
            run_suite(["relu"], trials=1, precision="f16")

    def test_progress_callback(self):
        seen = []
        reports = run_suite(["relu", "add"], trials=2, progress=seen.append)
        assert [r.op for r in seen] == ["relu", "add"] and seen == reports

    def test_random_maps_valid(self):
        for spmap in random_maps(np.random.default_rng(0), 20, 6, 7, 5):
            assert validate_map(spmap) == []
