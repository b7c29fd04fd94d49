"""Basic environment and import tests"""
import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))


def test_imports():
    """Every lab module imports cleanly"""
    import adversarial_lab
    import attacks
    import datasets
    import evaluation
    import experiment_config
    import experiment_manager
    import invariants
    import lab_host
    import models
    import optim_ref
    import tensor_core
    assert adversarial_lab.COMMAND_ALIASES["table1"] == "matrix"


def test_dependencies_available():
    """numpy and psutil are installed"""
    import numpy
    import psutil
    assert numpy.zeros(1).dtype == numpy.float64
    assert psutil.cpu_count() >= 1


def test_python_version():
    """Test Python version is 3.8+"""
    assert sys.version_info >= (3, 8)


def test_error_hierarchy():
    """Every library error derives from LabError"""
    from attacks import AttackError
    from datasets import DatasetError, IdxFormatError
    from evaluation import EvaluationError
    from experiment_config import ConfigError
    from invariants import InvariantViolation
    from models import CheckpointCorruptError, CheckpointVersionError, ModelError, TrainingDivergedError
    from optim_ref import DivergenceError
    from tensor_core import LabError, TensorError

    for exc in (TensorError, ModelError, TrainingDivergedError, CheckpointVersionError,
                CheckpointCorruptError, AttackError, InvariantViolation, DatasetError,
                IdxFormatError, EvaluationError, ConfigError, DivergenceError):
        assert issubclass(exc, LabError), f"{exc.__name__} is not a LabError"
