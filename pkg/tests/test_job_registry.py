from app.services.job_registry import JobRegistry


def test_job_lifecycle():
    registry = JobRegistry()
    job_id = registry.start_job("m-gap", 12)
    status = registry.get_status(job_id)
    assert status["status"] == "processing"
    assert status["job_id"] == job_id
    assert status["total_rows"] == 12

    registry.update_progress(job_id, 5)
    assert registry.get_status(job_id)["completed_rows"] == 5

    registry.complete_job(job_id, [{"N": 20}])
    status = registry.get_status(job_id)
    assert status["status"] == "completed"
    assert status["result"] == [{"N": 20}]


def test_explicit_job_ids_and_listing():
    registry = JobRegistry()
    registry.start_job("drain-n", 3, job_id="abc")
    registry.start_job("drain-m", 3)
    jobs = registry.list_jobs()
    assert len(jobs) == 2
    assert {job["table"] for job in jobs} == {"drain-n", "drain-m"}
    assert all("result" not in job for job in jobs)


def test_cancellation_only_while_processing():
    registry = JobRegistry()
    job_id = registry.start_job("pstar-gap", 4)
    assert registry.cancel_job(job_id) is True
    assert registry.is_cancelled(job_id) is True
    assert registry.get_status(job_id)["status"] == "cancelling"
    registry.mark_cancelled(job_id)
    assert registry.get_status(job_id)["status"] == "cancelled"
    assert registry.cancel_job(job_id) is False

    done = registry.start_job("m-gap", 1)
    registry.complete_job(done, [])
    assert registry.cancel_job(done) is False


def test_failure_records_error():
    registry = JobRegistry()
    job_id = registry.start_job("random-gap", 9)
    registry.fail_job(job_id, "boom")
    status = registry.get_status(job_id)
    assert status["status"] == "failed"
    assert status["error"] == "boom"


def test_unknown_jobs():
    registry = JobRegistry()
    assert registry.get_status("missing") is None
    assert registry.cancel_job("missing") is False
    assert registry.is_cancelled("missing") is False
    registry.update_progress("missing", 1)
