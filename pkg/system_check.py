import importlib
import logging
import platform
from importlib import metadata

logger = logging.getLogger(__name__)

# import name -> distribution name
RUNTIME_PACKAGES = {
    "numpy": "numpy",
    "pandas": "pandas",
    "scipy": "scipy",
    "yaml": "PyYAML",
    "tqdm": "tqdm",
}
OPTIONAL_PACKAGES = {
    "joblib": "joblib",
}


def collect_versions():
    """Installed versions of the runtime stack, for the run manifest."""
    versions = {"python": platform.python_version()}
    for distribution in list(RUNTIME_PACKAGES.values()) + list(OPTIONAL_PACKAGES.values()):
        try:
            versions[distribution] = metadata.version(distribution)
        except metadata.PackageNotFoundError:
            versions[distribution] = None
    return versions


def check_dependencies():
    """
    Check that required libraries import and report optional ones.

    Returns:
        List of missing required distributions (empty when all are present)
    """
    missing = []
    for module, distribution in RUNTIME_PACKAGES.items():
        try:
            importlib.import_module(module)
        except ImportError:
            logger.error("%s not installed. Install with: pip install %s", distribution, distribution)
            missing.append(distribution)
    for module, distribution in OPTIONAL_PACKAGES.items():
        try:
            importlib.import_module(module)
        except ImportError:
            logger.info("%s not installed; forest.n_jobs other than 1 will fail", distribution)
    return missing
