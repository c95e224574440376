"""Test module imports and dependencies."""

import pytest


class TestImports:
    """Test that all required modules can be imported correctly."""

    @pytest.mark.parametrize("module", ["numpy", "scipy.optimize", "scipy.stats", "pandas", "sklearn.neighbors"])
    def test_numeric_stack(self, module):
        """Test that the numeric dependencies are installed."""
        import importlib

        try:
            importlib.import_module(module)
        except ImportError as e:
            pytest.fail(f"Failed to import {module}: {e}")

    def test_package_structure(self):
        """Test that the public API is exported from the package root."""
        import inner_envelope

        assert hasattr(inner_envelope, "__version__")
        for name in inner_envelope.__all__:
            assert getattr(inner_envelope, name) is not None, name

        from inner_envelope import fit_global, fit_gmm, fit_local, select_dimension

        assert all(callable(fn) for fn in (fit_global, fit_gmm, fit_local, select_dimension))

    def test_console_script_entry_point(self):
        """Test that the console script entry point exists."""
        try:
            from inner_envelope.__main__ import main
            assert callable(main)
        except ImportError as e:
            pytest.fail(f"Failed to import console script entry point: {e}")

    def test_bundled_iris_table(self):
        """Test that the iris table ships with the package."""
        from inner_envelope.simulate import load_iris

        frame = load_iris()
        assert frame.shape == (150, 5)

    def test_environment_variables(self, environment_backup):
        """Test environment defaults and their validation."""
        import os

        from inner_envelope.config import resolve_jobs, resolve_kernel
        from inner_envelope.errors import DataError

        os.environ.pop("INNENV_JOBS", None)
        os.environ.pop("INNENV_KERNEL", None)
        assert resolve_jobs() == 1
        assert resolve_kernel() == "biweight"

        os.environ["INNENV_JOBS"] = "4"
        os.environ["INNENV_KERNEL"] = "Epanechnikov"
        assert resolve_jobs() == 4
        assert resolve_jobs(2) == 2
        assert resolve_kernel() == "epanechnikov"

        os.environ["INNENV_JOBS"] = "many"
        with pytest.raises(DataError):
            resolve_jobs()


class TestErrorHandling:
    """Test error handling and edge cases."""

    def test_error_codes(self):
        """Test that each error type maps to its code and exit status."""
        from inner_envelope.errors import (
            ConvergenceError,
            DataError,
            DimensionError,
            EstimationError,
            SingularBlockError,
        )

        test_cases = [
            (DataError("bad"), "INVALID_INPUT", 1),
            (DimensionError("bad"), "INVALID_DIMENSIONS", 2),
            (EstimationError("bad"), "ESTIMATION_FAILED", 1),
            (ConvergenceError("bad"), "NOT_CONVERGED", 3),
        ]
        for error, code, exit_code in test_cases:
            assert error.to_dict()["code"] == code
            assert error.exit_code == exit_code

        singular = SingularBlockError("top block", [2, 0, 1])
        assert singular.permutation == [2, 0, 1]
        assert singular.to_dict()["details"] == {"permutation": [2, 0, 1]}

    def test_details_omitted_when_empty(self):
        from inner_envelope.errors import DataError

        assert DataError("x").to_dict() == {"code": "INVALID_INPUT", "message": "x"}

    def test_value_errors(self):
        """Input errors remain catchable as ValueError."""
        from inner_envelope.errors import DataError, DimensionError

        assert issubclass(DataError, ValueError)
        assert issubclass(DimensionError, ValueError)

    def test_log_level_validation(self):
        from inner_envelope.config import configure_logging
        from inner_envelope.errors import DataError

        with pytest.raises(DataError):
            configure_logging("chatty")

    def test_parallel_map_preserves_order(self):
        from inner_envelope.config import parallel_map

        assert parallel_map(lambda x: x * x, range(10), jobs=3) == [x * x for x in range(10)]
