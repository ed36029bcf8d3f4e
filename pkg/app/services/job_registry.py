from typing import Dict, Any, Optional, List
import threading
import time
import uuid

class JobRegistry:
    def __init__(self):
        # schema: { job_id: { "table": str, "status": str, "completed_rows": int, "total_rows": int,
        #                     "cancelled": bool, "last_updated": float, "error": str|None, "result": list|None } }
        self._jobs: Dict[str, Dict[str, Any]] = {}
        self._lock = threading.Lock()

    def start_job(self, table: str, total_rows: int, job_id: Optional[str] = None) -> str:
        job_id = job_id or uuid.uuid4().hex[:12]
        with self._lock:
            self._jobs[job_id] = {
                "table": table,
                "status": "processing",
                "completed_rows": 0,
                "total_rows": total_rows,
                "cancelled": False,
                "last_updated": time.time(),
                "error": None,
                "result": None,
            }
        return job_id

    def update_progress(self, job_id: str, completed_rows: int, total_rows: Optional[int] = None):
        with self._lock:
            if job_id in self._jobs:
                self._jobs[job_id]["completed_rows"] = completed_rows
                if total_rows is not None:
                    self._jobs[job_id]["total_rows"] = total_rows
                self._jobs[job_id]["last_updated"] = time.time()

    def complete_job(self, job_id: str, result: List[Dict[str, Any]]):
        with self._lock:
            if job_id in self._jobs:
                self._jobs[job_id].update({
                    "status": "completed",
                    "result": result,
                    "last_updated": time.time()
                })

    def fail_job(self, job_id: str, error: str):
        with self._lock:
            if job_id in self._jobs:
                self._jobs[job_id].update({
                    "status": "failed",
                    "error": error,
                    "last_updated": time.time()
                })

    def cancel_job(self, job_id: str) -> bool:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None or job["status"] != "processing":
                return False
            job.update({
                "cancelled": True,
                "status": "cancelling",
                "last_updated": time.time()
            })
            return True

    def mark_cancelled(self, job_id: str):
        with self._lock:
            if job_id in self._jobs:
                self._jobs[job_id].update({
                    "status": "cancelled",
                    "last_updated": time.time()
                })

    def is_cancelled(self, job_id: str) -> bool:
        return self._jobs.get(job_id, {}).get("cancelled", False)

    def get_status(self, job_id: str) -> Optional[Dict[str, Any]]:
        job = self._jobs.get(job_id)
        return None if job is None else {"job_id": job_id, **job}

    def list_jobs(self) -> List[Dict[str, Any]]:
        # results can be large; the status endpoint returns them
        return [
            {"job_id": job_id, **{k: v for k, v in data.items() if k != "result"}}
            for job_id, data in self._jobs.items()
        ]

# Singleton Instance
job_registry = JobRegistry()
