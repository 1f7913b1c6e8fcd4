import json
import os
import sqlite3
import time
import uuid
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional

import config


@dataclass(frozen=True)
class Migration:
    version: int
    name: str
    statements: Iterable[str]


LATEST_SCHEMA_VERSION = 1


MIGRATIONS = {
    1: Migration(
        version=1,
        name="init_runs",
        statements=(
            """
            CREATE TABLE IF NOT EXISTS runs (
              id TEXT PRIMARY KEY,
              created_at INTEGER NOT NULL,
              ended_at INTEGER NULL,
              master_seed INTEGER NOT NULL,
              outcome TEXT NULL,
              config_json TEXT NULL,
              manifest_json TEXT NULL
            )
            """,
            "CREATE INDEX IF NOT EXISTS idx_runs_created_at ON runs(created_at)",
            """
            CREATE TABLE IF NOT EXISTS trial_rows (
              run_id TEXT NOT NULL,
              method TEXT NOT NULL,
              snr_db REAL NOT NULL,
              trial INTEGER NOT NULL,
              target INTEGER NOT NULL,
              row_json TEXT NOT NULL,
              PRIMARY KEY (run_id, method, snr_db, trial, target),
              FOREIGN KEY (run_id) REFERENCES runs(id) ON DELETE CASCADE
            )
            """,
            """
            CREATE TABLE IF NOT EXISTS metrics (
              run_id TEXT NOT NULL,
              method TEXT NOT NULL,
              snr_db REAL NOT NULL,
              target_class TEXT NOT NULL,
              row_json TEXT NOT NULL,
              PRIMARY KEY (run_id, method, snr_db, target_class),
              FOREIGN KEY (run_id) REFERENCES runs(id) ON DELETE CASCADE
            )
            """,
        ),
    )
}


def _log(log, level: str, msg: str):
    if not log:
        return
    fn = getattr(log, level, None)
    if callable(fn):
        fn(msg)


def default_db_path() -> str:
    return config.sqlite_db_path or os.path.abspath(
        os.path.join(os.path.dirname(__file__), "..", "storage", "pwr.sqlite3"))


def connect(db_path: str) -> sqlite3.Connection:
    # autocommit, BEGIN/COMMIT are issued explicitly
    conn = sqlite3.connect(db_path, timeout=30, isolation_level=None)
    conn.row_factory = sqlite3.Row
    return conn


def _connect_configured(db_path: str) -> sqlite3.Connection:
    conn = connect(db_path)
    _configure_connection(conn)
    return conn


def _dumps(obj) -> str:
    # inf/nan are not JSON, they are stored as strings
    return json.dumps(_jsonable(obj), ensure_ascii=True, separators=(",", ":"), sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, float) and not (obj == obj and abs(obj) != float("inf")):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def ensure_db(db_path: Optional[str] = None, *, log=None) -> str:
    """Ensure a usable SQLite DB exists and is migrated.

    Returns the resolved db_path.
    """

    db_path = db_path or default_db_path()
    os.makedirs(os.path.dirname(os.path.abspath(db_path)), exist_ok=True)

    conn = connect(db_path)
    try:
        _configure_connection(conn)
        _ensure_schema_version_table(conn)
        current = _get_schema_version(conn)
        if current < LATEST_SCHEMA_VERSION:
            _migrate(conn, current, log=log)
    finally:
        conn.close()

    return db_path


def create_run(
    db_path: str,
    *,
    master_seed: int,
    config: Optional[dict] = None,
    created_at: Optional[int] = None,
    outcome: str = "RUNNING",
) -> str:
    """Create a run row and return its id."""

    created_at = int(created_at if created_at is not None else time.time())
    rid = str(uuid.uuid4())
    config_json = _dumps(config) if config is not None else None

    conn = _connect_configured(db_path)
    try:
        conn.execute("BEGIN")
        conn.execute(
            """
            INSERT INTO runs(id, created_at, ended_at, master_seed, outcome, config_json, manifest_json)
            VALUES (?, ?, NULL, ?, ?, ?, NULL)
            """,
            (rid, created_at, int(master_seed), outcome, config_json),
        )
        conn.execute("COMMIT")
    except Exception:
        conn.execute("ROLLBACK")
        raise
    finally:
        conn.close()

    return rid


def finish_run(
    db_path: str,
    *,
    run_id: str,
    outcome: str,
    manifest: Optional[dict] = None,
    ended_at: Optional[int] = None,
) -> bool:
    """Mark a run ended. Returns True if a row was updated; a run that
    already ended is left alone."""

    ended_at = int(ended_at if ended_at is not None else time.time())

    conn = _connect_configured(db_path)
    try:
        conn.execute("BEGIN")
        cur = conn.execute(
            """
            UPDATE runs
            SET ended_at = ?, outcome = ?, manifest_json = ?
            WHERE id = ? AND ended_at IS NULL
            """,
            (ended_at, outcome, _dumps(manifest) if manifest is not None else None, run_id),
        )
        conn.execute("COMMIT")
        return bool(cur.rowcount)
    except Exception:
        conn.execute("ROLLBACK")
        raise
    finally:
        conn.close()


def add_trial_rows(db_path: str, *, run_id: str, rows: List[dict]) -> int:
    """Persist per-target trial rows. Each dict needs method, snr_db,
    trial and target; the whole dict goes to row_json."""

    conn = _connect_configured(db_path)
    try:
        conn.execute("BEGIN")
        conn.executemany(
            """
            INSERT OR REPLACE INTO trial_rows(run_id, method, snr_db, trial, target, row_json)
            VALUES (?, ?, ?, ?, ?, ?)
            """,
            [(run_id, r["method"], float(r["snr_db"]), int(r["trial"]), int(r["target"]), _dumps(r))
             for r in rows],
        )
        conn.execute("COMMIT")
        return len(rows)
    except Exception:
        conn.execute("ROLLBACK")
        raise
    finally:
        conn.close()


def add_metrics(db_path: str, *, run_id: str, records: List[dict]) -> int:
    conn = _connect_configured(db_path)
    try:
        conn.execute("BEGIN")
        conn.executemany(
            """
            INSERT OR REPLACE INTO metrics(run_id, method, snr_db, target_class, row_json)
            VALUES (?, ?, ?, ?, ?)
            """,
            [(run_id, r["method"], float(r["snr_db"]), r["target_class"], _dumps(r)) for r in records],
        )
        conn.execute("COMMIT")
        return len(records)
    except Exception:
        conn.execute("ROLLBACK")
        raise
    finally:
        conn.close()


def list_runs(
    db_path: str,
    *,
    limit: int = 50,
    offset: int = 0,
) -> List[Dict[str, Any]]:
    """List runs ordered by created_at desc, without the JSON blobs."""

    limit_i = int(limit)
    offset_i = int(offset)
    if limit_i <= 0:
        limit_i = 50
    if limit_i > 500:
        limit_i = 500
    if offset_i < 0:
        offset_i = 0

    conn = _connect_configured(db_path)
    try:
        rows = list(
            conn.execute(
                """
                SELECT id, created_at, ended_at, master_seed, outcome
                FROM runs
                ORDER BY created_at DESC, id
                LIMIT ? OFFSET ?
                """,
                (limit_i, offset_i),
            )
        )
        return [dict(r) for r in rows]
    finally:
        conn.close()


def _load(text: Optional[str]):
    if text is None:
        return None
    try:
        return json.loads(text)
    except ValueError:
        return None


def get_run(db_path: str, *, run_id: str) -> Optional[Dict[str, Any]]:
    """Fetch a run with its parsed config and manifest, or None."""

    conn = _connect_configured(db_path)
    try:
        row = conn.execute(
            """
            SELECT id, created_at, ended_at, master_seed, outcome, config_json, manifest_json
            FROM runs
            WHERE id = ?
            """,
            (run_id,),
        ).fetchone()
        if not row:
            return None
        out = dict(row)
        out["config"] = _load(out.pop("config_json"))
        out["manifest"] = _load(out.pop("manifest_json"))
        return out
    finally:
        conn.close()


def list_trial_rows(
    db_path: str,
    *,
    run_id: str,
    method: Optional[str] = None,
    snr_db: Optional[float] = None,
    limit: int = 5000,
) -> List[Dict[str, Any]]:
    """Trial rows of a run in canonical order (method, snr, trial, target),
    optionally filtered by method and SNR."""

    limit_i = int(limit)
    if limit_i <= 0:
        limit_i = 5000

    where = ["run_id = ?"]
    params: List[Any] = [run_id]
    if method is not None:
        where.append("method = ?")
        params.append(method)
    if snr_db is not None:
        where.append("snr_db = ?")
        params.append(float(snr_db))
    params.append(limit_i)

    conn = _connect_configured(db_path)
    try:
        rows = list(
            conn.execute(
                """
                SELECT row_json
                FROM trial_rows
                WHERE {where_sql}
                ORDER BY method, snr_db, trial, target
                LIMIT ?
                """.format(where_sql=" AND ".join(where)),
                tuple(params),
            )
        )
        return [_load(r["row_json"]) for r in rows]
    finally:
        conn.close()


def list_metrics(db_path: str, *, run_id: str) -> List[Dict[str, Any]]:
    conn = _connect_configured(db_path)
    try:
        rows = list(conn.execute(
            "SELECT row_json FROM metrics WHERE run_id = ? ORDER BY method, snr_db, target_class",
            (run_id,)))
        return [_load(r["row_json"]) for r in rows]
    finally:
        conn.close()


def _configure_connection(conn: sqlite3.Connection) -> None:
    conn.execute("PRAGMA foreign_keys = ON")
    conn.execute("PRAGMA journal_mode = WAL")
    conn.execute("PRAGMA synchronous = NORMAL")
    conn.execute("PRAGMA busy_timeout = 5000")


def _ensure_schema_version_table(conn: sqlite3.Connection) -> None:
    conn.execute(
        """
        CREATE TABLE IF NOT EXISTS schema_version (
          version INTEGER NOT NULL
        )
        """
    )


def _get_schema_version(conn: sqlite3.Connection) -> int:
    rows = list(conn.execute("SELECT version FROM schema_version"))
    if not rows:
        conn.execute("INSERT INTO schema_version(version) VALUES (0)")
        return 0
    v = max(int(r[0]) for r in rows)
    if len(rows) != 1:
        conn.execute("DELETE FROM schema_version")
        conn.execute("INSERT INTO schema_version(version) VALUES (?)", (v,))
    return v


def _set_schema_version(conn: sqlite3.Connection, version: int) -> None:
    conn.execute("DELETE FROM schema_version")
    conn.execute("INSERT INTO schema_version(version) VALUES (?)", (int(version),))


def _migrate(conn: sqlite3.Connection, current_version: int, *, log=None) -> None:
    start = time.time()
    _log(log, "info", f"SQLite: migrating schema from v{current_version} to v{LATEST_SCHEMA_VERSION}")

    # serialize concurrent migrations
    conn.execute("BEGIN IMMEDIATE")
    try:
        current = _get_schema_version(conn)
        for target in range(current + 1, LATEST_SCHEMA_VERSION + 1):
            mig = MIGRATIONS.get(target)
            if not mig:
                raise RuntimeError(f"Missing migration for schema version {target}")

            _log(log, "info", f"SQLite: applying v{mig.version} ({mig.name})")
            for stmt in mig.statements:
                conn.execute(stmt)
            _set_schema_version(conn, mig.version)

        conn.execute("COMMIT")
    except Exception as e:
        conn.execute("ROLLBACK")
        _log(log, "error", f"SQLite: migration failed: {e}")
        raise

    _log(log, "info", f"SQLite: migration complete in {time.time() - start:.3f}s")
