import os
import tempfile
from unittest import TestCase

from src.dao.run_record_repository import RunRecordRepository, RunRecordRepositoryException


class TestRunRecordRepository(TestCase):
    def test_append_should_keep_records_in_write_order(self):
        with tempfile.TemporaryDirectory() as directory:
            #given
            under_test = RunRecordRepository(os.path.join(directory, "run"))

            #when
            under_test.append({"step": 1, "loss": 0.7})
            under_test.append({"step": 2, "loss": 0.6})

            #then
            self.assertEqual(under_test.read_metrics(), [{"step": 1, "loss": 0.7}, {"step": 2, "loss": 0.6}])

    def test_read_metrics_should_be_empty_before_the_first_record(self):
        with tempfile.TemporaryDirectory() as directory:
            self.assertEqual(RunRecordRepository(directory).read_metrics(), [])

    def test_save_report_should_write_a_report_that_loads_back(self):
        with tempfile.TemporaryDirectory() as directory:
            #given
            under_test = RunRecordRepository(directory)
            report = {"name": "run", "final_auc": 0.71, "trajectory": []}

            #when
            path = under_test.save_report(report)

            #then
            self.assertEqual(path, os.path.join(directory, "report.json"))
            self.assertEqual(RunRecordRepository.load_report(path), report)

    def test_load_report_should_raise_for_a_missing_file(self):
        with tempfile.TemporaryDirectory() as directory:
            with self.assertRaises(RunRecordRepositoryException):
                RunRecordRepository.load_report(os.path.join(directory, "nothing.json"))
