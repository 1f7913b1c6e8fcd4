import os
import sys
import tempfile
import unittest


ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
sys.path.insert(0, ROOT)
sys.path.insert(0, os.path.join(ROOT, "lib"))

from results_db import (
    add_metrics,
    add_trial_rows,
    connect,
    create_run,
    ensure_db,
    finish_run,
    get_run,
    list_metrics,
    list_runs,
    list_trial_rows,
)


def row(method, snr, trial, target, error=0.5):
    return {"method": method, "snr_db": snr, "trial": trial, "target": target, "error": error}


class TestResultsDbMigrations(unittest.TestCase):
    def test_fresh_db_creates_version_and_tables(self):
        with tempfile.TemporaryDirectory() as td:
            db_path = os.path.join(td, "pwr.sqlite3")
            ensure_db(db_path)

            conn = connect(db_path)
            try:
                version = conn.execute("SELECT version FROM schema_version").fetchone()[0]
                self.assertEqual(int(version), 1)

                tables = {
                    r[0]
                    for r in conn.execute(
                        "SELECT name FROM sqlite_master WHERE type='table' ORDER BY name"
                    )
                }
                self.assertIn("schema_version", tables)
                self.assertIn("runs", tables)
                self.assertIn("trial_rows", tables)
                self.assertIn("metrics", tables)
            finally:
                conn.close()

    def test_ensure_db_is_idempotent(self):
        with tempfile.TemporaryDirectory() as td:
            db_path = os.path.join(td, "pwr.sqlite3")
            ensure_db(db_path)
            ensure_db(db_path)

            conn = connect(db_path)
            try:
                rows = list(conn.execute("SELECT version FROM schema_version"))
                self.assertEqual(len(rows), 1)
                self.assertEqual(int(rows[0][0]), 1)
            finally:
                conn.close()


class TestResultsDbRuns(unittest.TestCase):
    def setUp(self):
        self._td = tempfile.TemporaryDirectory()
        self.db_path = os.path.join(self._td.name, "pwr.sqlite3")
        ensure_db(self.db_path)

    def tearDown(self):
        self._td.cleanup()

    def test_list_runs_orders_by_created_at_desc(self):
        rid1 = create_run(self.db_path, master_seed=1, created_at=100)
        rid2 = create_run(self.db_path, master_seed=2, created_at=200)
        runs = list_runs(self.db_path)
        self.assertEqual([r["id"] for r in runs], [rid2, rid1])
        self.assertEqual(runs[0]["outcome"], "RUNNING")

    def test_finish_run_is_idempotent(self):
        rid = create_run(self.db_path, master_seed=7, config={"trials": 3})
        self.assertTrue(finish_run(self.db_path, run_id=rid, outcome="COMPLETED", manifest={"resamples": 0}))
        self.assertFalse(finish_run(self.db_path, run_id=rid, outcome="FAILED"))

        run = get_run(self.db_path, run_id=rid)
        self.assertEqual(run["outcome"], "COMPLETED")
        self.assertEqual(run["config"], {"trials": 3})
        self.assertEqual(run["manifest"], {"resamples": 0})
        self.assertIsNotNone(run["ended_at"])

    def test_get_run_returns_none_for_missing(self):
        self.assertIsNone(get_run(self.db_path, run_id="missing"))

    def test_trial_rows_filter_and_order(self):
        rid = create_run(self.db_path, master_seed=1)
        add_trial_rows(self.db_path, run_id=rid, rows=[
            row("ndp_as", 10.0, 1, 0),
            row("hybrid_as", 10.0, 0, 1),
            row("hybrid_as", 0.0, 0, 0),
            row("hybrid_as", 10.0, 0, 0, error=float("inf")),
        ])

        rows = list_trial_rows(self.db_path, run_id=rid)
        self.assertEqual([(r["method"], r["snr_db"], r["trial"], r["target"]) for r in rows], [
            ("hybrid_as", 0.0, 0, 0),
            ("hybrid_as", 10.0, 0, 0),
            ("hybrid_as", 10.0, 0, 1),
            ("ndp_as", 10.0, 1, 0),
        ])
        # inf is not JSON, it comes back as its repr
        self.assertEqual(rows[1]["error"], "inf")

        hybrid_10 = list_trial_rows(self.db_path, run_id=rid, method="hybrid_as", snr_db=10.0)
        self.assertEqual([r["target"] for r in hybrid_10], [0, 1])

        limited = list_trial_rows(self.db_path, run_id=rid, limit=2)
        self.assertEqual(len(limited), 2)

    def test_metrics(self):
        rid = create_run(self.db_path, master_seed=1)
        add_metrics(self.db_path, run_id=rid, records=[
            {"method": "ndp_as", "snr_db": 0.0, "target_class": "client", "hit_rate": 0.5, "rmse": None},
            {"method": "hybrid_as", "snr_db": 0.0, "target_class": "client", "hit_rate": 0.75, "rmse": 1.0},
        ])
        metrics = list_metrics(self.db_path, run_id=rid)
        self.assertEqual([m["method"] for m in metrics], ["hybrid_as", "ndp_as"])
        self.assertIsNone(metrics[1]["rmse"])


if __name__ == "__main__":
    unittest.main()
