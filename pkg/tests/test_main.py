import io
import os
import tempfile
from contextlib import redirect_stdout
from unittest import TestCase

import main


class TestMain(TestCase):
    def test_sim_parallel_should_print_events_and_pass(self):
        #given
        out = io.StringIO()

        #when
        with redirect_stdout(out):
            status = main.main(["sim-parallel", "--devices", "2", "--layers", "2"])

        #then
        self.assertEqual(status, 0)
        self.assertIn('"kind": "all2all"', out.getvalue())
        self.assertTrue(out.getvalue().rstrip().endswith("PASS"))

    def test_main_should_return_one_for_a_domain_error(self):
        with redirect_stdout(io.StringIO()):
            self.assertEqual(main.main(["sim-parallel", "--devices", "3", "--layers", "1"]), 1)
            self.assertEqual(main.main(["report", "does-not-exist.json"]), 1)

    def test_train_should_return_one_for_negative_init_scales(self):
        with tempfile.TemporaryDirectory() as directory, redirect_stdout(io.StringIO()):
            #given
            with open("tests/dao/test_experiment.toml") as source:
                content = source.read().replace("init_scales = [1.0, 1.0, 0.1]", "init_scales = [1.0, -1.0, 0.1]")
            experiment_file = os.path.join(directory, "negative.toml")
            with open(experiment_file, "w") as target:
                target.write(content)

            #when
            status = main.main(["train", "--config", experiment_file, "--output", directory])

            #then
            self.assertEqual(status, 1)

    def test_train_then_sparsify_should_write_reports(self):
        with tempfile.TemporaryDirectory() as directory, redirect_stdout(io.StringIO()):
            #when
            train_status = main.main(["train", "--config", "tests/dao/test_experiment.toml", "--output", directory])
            checkpoint = os.path.join(directory, "checkpoint", "model.npz")
            sparsify_status = main.main(["sparsify", "--checkpoint", checkpoint])

            #then
            self.assertEqual(train_status, 0)
            self.assertEqual(sparsify_status, 0)
            self.assertTrue(os.path.exists(os.path.join(directory, "report.json")))
            self.assertTrue(os.path.exists(os.path.join(directory, "checkpoint", "sparsify-4-2.json")))

    def test_parser_should_require_a_command(self):
        with self.assertRaises(SystemExit):
            main.build_parser().parse_args([])
