from system_check import OPTIONAL_PACKAGES, RUNTIME_PACKAGES, check_dependencies, collect_versions


def test_runtime_stack_is_installed():
    assert check_dependencies() == []


def test_versions_name_every_package():
    versions = collect_versions()
    assert versions["python"]
    for distribution in list(RUNTIME_PACKAGES.values()) + list(OPTIONAL_PACKAGES.values()):
        assert distribution in versions
    assert versions["numpy"] is not None
