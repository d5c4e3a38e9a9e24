import json
import logging
import os


class RunRecordRepositoryException(Exception):
    """Base class for Exceptions of RunRecordRepository"""
    def __init__(self, message: str):
        """Base class for Exceptions of RunRecordRepository"""
        super().__init__(message)


class RunRecordRepository:
    """Line-delimited JSON metric records and JSON run reports of one run directory."""
    def __init__(self, directory: str, metrics_file: str = "metrics.jsonl") -> None:
        self.__directory = directory
        self.__metrics_path = os.path.join(directory, metrics_file)

    @property
    def directory(self) -> str:
        return self.__directory

    @property
    def metrics_path(self) -> str:
        return self.__metrics_path

    def append(self, record: dict) -> None:
        """Add one metric record as a JSON line."""
        os.makedirs(self.directory, exist_ok=True)
        with open(self.metrics_path, mode="a", encoding="utf-8") as target:
            target.write(json.dumps(record, sort_keys=True) + "\n")

    def read_metrics(self) -> list:
        """
        Every metric record of the run, in write order.

        Returns:
            list: the records, empty if nothing was written yet.
        """
        if not os.path.exists(self.metrics_path):
            return []
        with open(self.metrics_path, mode="r", encoding="utf-8") as source:
            return [json.loads(line) for line in source if line.strip()]

    def save_report(self, report: dict, name: str = "report.json") -> str:
        """Write a run report and return its path."""
        os.makedirs(self.directory, exist_ok=True)
        path = os.path.join(self.directory, name)
        with open(path, mode="w", encoding="utf-8") as target:
            json.dump(report, target, indent=2, sort_keys=True)
        logging.info(f"Run report written to {path}.")
        return path

    @staticmethod
    def load_report(path: str) -> dict:
        """
        Read a run report written by `save_report`.

        Raises:
            RunRecordRepositoryException: if the file is missing or not JSON.
        """
        try:
            with open(path, mode="r", encoding="utf-8") as source:
                return json.load(source)
        except (OSError, json.JSONDecodeError) as e:
            raise RunRecordRepositoryException(f"Cannot read run report '{path}': {e}")
