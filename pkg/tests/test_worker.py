import pytest

from dualdistill.worker import Worker, run_workers


def _square(x):
    if x == 3:
        raise ValueError('three')
    return x * x


@pytest.mark.parametrize('num_workers', [0, 4])
def test_run_workers_keeps_order_and_collects_errors(num_workers):
    results, errors = run_workers(_square, list(range(6)), num_workers)
    assert results == [0, 1, 4, None, 16, 25]
    assert len(errors) == 1
    position, exc_info = errors[0]
    assert position == 3
    assert isinstance(exc_info[1], ValueError)


def test_run_workers_on_no_items():
    assert run_workers(_square, [], 4) == ([], [])


def test_worker_keeps_errors_instead_of_raising():
    worker = Worker(lambda x: 1 / x, 0).run()
    assert worker.result is None
    assert worker.exc_info[0] is ZeroDivisionError
