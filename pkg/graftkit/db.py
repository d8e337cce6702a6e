# graftkit/db.py
"""Run registry: every CLI run, its config echo, per-epoch losses and result rows."""
import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd
from sqlalchemy import create_engine, text
from sqlalchemy.exc import SQLAlchemyError

logger = logging.getLogger(__name__)


def registry_url(out_dir):
    return os.environ.get("GRAFTKIT_DB_URL", f"sqlite:///{Path(out_dir) / 'graftkit_runs.db'}")


def get_db_engine(url):
    """Creates the registry engine; returns None when the database is unreachable."""
    try:
        if url.startswith("sqlite:///"):
            Path(url[len("sqlite:///"):]).parent.mkdir(parents=True, exist_ok=True)
        engine = create_engine(url)
        with engine.connect():
            pass
        logger.info(f"Run registry connected: {engine.url.render_as_string(hide_password=True)}")
        return engine
    except Exception as e:
        logger.error(f"Could not connect to the run registry at {url}: {e}")
        return None


def _id_column(engine):
    if engine.dialect.name == "postgresql":
        return "SERIAL PRIMARY KEY"
    return "INTEGER PRIMARY KEY AUTOINCREMENT"


def create_run_tables(engine):
    """Creates the registry tables if they do not exist."""
    id_col = _id_column(engine)
    try:
        with engine.begin() as conn:
            conn.execute(text(f"""
                CREATE TABLE IF NOT EXISTS graft_runs (
                    id {id_col},
                    command VARCHAR(32) NOT NULL,
                    status VARCHAR(16) NOT NULL,
                    out_dir TEXT,
                    config_json TEXT,
                    summary_json TEXT,
                    started_at VARCHAR(40) NOT NULL,
                    finished_at VARCHAR(40)
                );
            """))
            conn.execute(text(f"""
                CREATE TABLE IF NOT EXISTS graft_epoch_losses (
                    id {id_col},
                    run_id INTEGER REFERENCES graft_runs(id) ON DELETE CASCADE,
                    epoch INTEGER NOT NULL,
                    frl DOUBLE PRECISION,
                    fel DOUBLE PRECISION,
                    fsl DOUBLE PRECISION,
                    total DOUBLE PRECISION,
                    UNIQUE(run_id, epoch)
                );
            """))
            conn.execute(text(f"""
                CREATE TABLE IF NOT EXISTS graft_results (
                    id {id_col},
                    run_id INTEGER REFERENCES graft_runs(id) ON DELETE CASCADE,
                    kind VARCHAR(32) NOT NULL,
                    row_json TEXT NOT NULL
                );
            """))
        logger.info("Registry tables created/exist.")
        return True
    except Exception as e:
        logger.exception(f"Error creating registry tables: {e}")
        return False


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def insert_run(engine, command, config, out_dir):
    """Registers a started run and returns its id (None on failure)."""
    logger.info(f"Registering {command} run in {out_dir}")
    try:
        with engine.begin() as conn:
            result = conn.execute(
                text("""
                INSERT INTO graft_runs (command, status, out_dir, config_json, started_at)
                VALUES (:command, 'running', :out_dir, :config_json, :started_at)
                RETURNING id;
                """),
                {"command": command, "out_dir": str(out_dir),
                 "config_json": json.dumps(config, default=str, sort_keys=True), "started_at": _now()},
            )
            row = result.fetchone()
        if row:
            logger.info(f"insert_run successful. ID: {row[0]}")
            return row[0]
        logger.error("Error: insert_run - No ID returned.")
        return None
    except SQLAlchemyError as e:
        logger.error(f"Error in insert_run: {e}")
        return None


def finish_run(engine, run_id, status, summary=None):
    try:
        with engine.begin() as conn:
            conn.execute(
                text("""
                UPDATE graft_runs
                SET status = :status, summary_json = :summary_json, finished_at = :finished_at
                WHERE id = :run_id;
                """),
                {"status": status, "summary_json": json.dumps(summary or {}, default=str),
                 "finished_at": _now(), "run_id": run_id},
            )
        logger.info(f"finish_run successful. run_id: {run_id}, status: {status}")
    except SQLAlchemyError as e:
        logger.exception(f"Error in finish_run: {e}")


def insert_epoch_losses(engine, run_id, epoch_rows):
    """Upserts per-epoch mean losses; `epoch_rows` are dicts with epoch, frl, fel, fsl, total."""
    try:
        with engine.begin() as conn:
            for row in epoch_rows:
                conn.execute(
                    text("""
                    INSERT INTO graft_epoch_losses (run_id, epoch, frl, fel, fsl, total)
                    VALUES (:run_id, :epoch, :frl, :fel, :fsl, :total)
                    ON CONFLICT (run_id, epoch) DO UPDATE
                    SET frl = EXCLUDED.frl,
                        fel = EXCLUDED.fel,
                        fsl = EXCLUDED.fsl,
                        total = EXCLUDED.total;
                    """),
                    {"run_id": run_id, **{k: row[k] for k in ("epoch", "frl", "fel", "fsl", "total")}},
                )
        logger.info(f"insert_epoch_losses successful. run_id: {run_id}, rows: {len(epoch_rows)}")
    except Exception as e:
        logger.exception(f"Error in insert_epoch_losses: {e}")


def insert_results(engine, run_id, kind, df):
    """Stores each DataFrame row as JSON under a result kind (ablation, split_sweep, ...)."""
    try:
        with engine.begin() as conn:
            for row in df.to_dict(orient="records"):
                conn.execute(
                    text("INSERT INTO graft_results (run_id, kind, row_json) VALUES (:run_id, :kind, :row_json);"),
                    {"run_id": run_id, "kind": kind, "row_json": json.dumps(row, default=str)},
                )
        logger.info(f"insert_results successful. run_id: {run_id}, kind: {kind}, rows: {len(df)}")
    except Exception as e:
        logger.exception(f"Error in insert_results: {e}")


def get_runs(engine):
    try:
        with engine.connect() as conn:
            df = pd.read_sql_query(text("SELECT * FROM graft_runs ORDER BY id;"), conn)
        logger.info(f"get_runs successful. Rows returned: {len(df)}")
        return df
    except Exception as e:
        logger.exception(f"Error retrieving runs: {e}")
        return pd.DataFrame()


def get_epoch_losses(engine, run_id):
    try:
        with engine.connect() as conn:
            df = pd.read_sql_query(
                text("SELECT epoch, frl, fel, fsl, total FROM graft_epoch_losses WHERE run_id = :run_id ORDER BY epoch;"),
                conn, params={"run_id": run_id},
            )
        return df
    except Exception as e:
        logger.exception(f"Error retrieving epoch losses: {e}")
        return pd.DataFrame()


def get_results(engine, run_id, kind):
    try:
        with engine.connect() as conn:
            df = pd.read_sql_query(
                text("SELECT row_json FROM graft_results WHERE run_id = :run_id AND kind = :kind ORDER BY id;"),
                conn, params={"run_id": run_id, "kind": kind},
            )
        return pd.DataFrame([json.loads(r) for r in df["row_json"]])
    except Exception as e:
        logger.exception(f"Error retrieving {kind} results: {e}")
        return pd.DataFrame()
