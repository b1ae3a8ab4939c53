import numpy as np
import pytest

from ppctsim.datagen import GenConfig, LogRecord, Platform, generate_logs


def make_record(record_id=0, *, y=1, z=0, x=None, x_prime=None, platform=Platform.ANDROID, os_version=12,
                target_app=0, ad_id=0, user_id=None, opted_in=False, click_time=0, z_true_prob=None):
    if x is None:
        x = np.zeros(3)
    if x_prime is None and y:
        x_prime = np.zeros(2)
    return LogRecord(
        record_id=record_id,
        user_id=record_id if user_id is None else user_id,
        x=np.asarray(x, dtype=float),
        x_prime=None if x_prime is None else np.asarray(x_prime, dtype=float),
        y=y,
        z=z,
        z_true_prob=z_true_prob,
        platform=platform,
        os_version=os_version,
        target_app=target_app,
        ad_id=ad_id,
        opted_in=opted_in,
        click_time=click_time,
    )


@pytest.fixture(scope="session")
def small_gen():
    return GenConfig(n_users=600, dim_x=8, seed=3)


@pytest.fixture(scope="session")
def small_logs(small_gen):
    return generate_logs(small_gen)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
