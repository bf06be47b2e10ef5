"""
Run Ledger for encode pipelines
Records every pipeline stage, its outcome and its settings in an sqlite trail
"""

import json
import logging
import sqlite3
import time
import uuid
from contextlib import contextmanager

logger = logging.getLogger(__name__)

SCHEMA = '''
    CREATE TABLE IF NOT EXISTS run_events (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        timestamp TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
        run_id TEXT NOT NULL,
        stage TEXT NOT NULL,
        success BOOLEAN,
        duration_s REAL,
        details TEXT
    )
'''


class RunLedger:
    """
    Stage-level audit trail of pipeline runs
    """

    def __init__(self, db_path=':memory:', run_id=None):
        """
        Initialize the ledger

        Args:
            db_path: sqlite database path (in-memory by default)
            run_id: Identifier shared by all events of this run
        """
        self.db_path = db_path
        self.run_id = run_id or uuid.uuid4().hex[:12]
        self.conn = sqlite3.connect(db_path)
        self.conn.row_factory = sqlite3.Row
        self.conn.execute(SCHEMA)
        self.conn.commit()

    def log_stage(self, stage, success=True, duration_s=None, details=None):
        """
        Record one stage outcome

        Args:
            stage: Stage name (partition, sketch_encode, prune, ...)
            success: Whether the stage completed
            duration_s: Wall time of the stage
            details: Additional JSON-serialisable details
        """
        try:
            details_json = json.dumps(details, sort_keys=True, default=str) if details else None
            self.conn.execute('''
                INSERT INTO run_events (run_id, stage, success, duration_s, details)
                VALUES (?, ?, ?, ?, ?)
            ''', (self.run_id, stage, success, duration_s, details_json))
            self.conn.commit()

            logger.info(f"📋 {self.run_id} - {stage} - {'✅' if success else '❌'}"
                        + (f" ({duration_s:.2f}s)" if duration_s is not None else ""))
        except Exception as e:
            # a ledger failure never aborts the run
            logger.error(f"❌ Ledger write failed: {e}")

    @contextmanager
    def stage(self, name, **details):
        """
        Time a stage and record its outcome

        Usage:
            with ledger.stage('partition', lines=12):
                ...
        """
        start = time.perf_counter()
        try:
            yield details
        except Exception as e:
            details['error'] = str(e)
            self.log_stage(name, False, time.perf_counter() - start, details)
            raise
        self.log_stage(name, True, time.perf_counter() - start, details)

    def get_trail(self, run_id=None, stage=None, limit=100):
        """
        Retrieve recorded events, oldest first

        Args:
            run_id: Filter by run (defaults to every run)
            stage: Filter by stage name
            limit: Maximum number of rows

        Returns:
            List of event dicts with details decoded
        """
        query = "SELECT * FROM run_events WHERE 1=1"
        params = []

        if run_id:
            query += " AND run_id = ?"
            params.append(run_id)

        if stage:
            query += " AND stage = ?"
            params.append(stage)

        query += " ORDER BY id ASC LIMIT ?"
        params.append(limit)

        rows = []
        for row in self.conn.execute(query, params).fetchall():
            entry = dict(row)
            entry['success'] = bool(entry['success'])
            entry['details'] = json.loads(entry['details']) if entry['details'] else {}
            rows.append(entry)
        return rows

    def close(self):
        if self.conn:
            self.conn.close()
            self.conn = None
