import pytest

from volbracket import TorusDomain, sample_field


@pytest.fixture(scope="session")
def sin_pair_512():
    d = TorusDomain(2, 512)
    return [sample_field(d, "sin(2πx)"), sample_field(d, "sin(2πy)")]


@pytest.fixture(scope="session")
def thin_pair_512():
    d = TorusDomain(2, 512)
    return [sample_field(d, "0.001*sin(2πx)"), sample_field(d, "sin(2πy)")]


def pair(res, first="sin(2πx)", second="sin(2πy)"):
    d = TorusDomain(2, res)
    return [sample_field(d, first), sample_field(d, second)]
