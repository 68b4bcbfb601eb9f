import json
import tempfile
import unittest
from pathlib import Path

from cooklab.report_generator import ReportGenerator


class TestReportGenerator(unittest.TestCase):

    def setUp(self):
        self.generator = ReportGenerator()
        self.metrics = {"final": {"chamfer": {"sum": 0.125, "mean": 0.0004}, "emd": {"sum": 0.5, "mean": 0.002}}}
        self.records = [{
            "stage": 0, "tool": "press_circle", "params": {"x": 0.0, "y": 0.001, "z": 0.012},
            "pre_loss": 1.2, "post_loss": 0.4, "predicted_loss": 0.35, "wall_time": 0.8,
        }]

    def test_build_report(self):
        report = self.generator.build_report(self.metrics, "0123456789abcdef", 7, {"actions": 1}, self.records, 4)
        self.assertEqual(report["config_hash"], "0123456789abcdef")
        self.assertEqual(report["seed"], 7)
        self.assertEqual(report["exit_code"], 4)
        self.assertEqual(report["records"], self.records)
        self.assertIn("generated", report)

    def test_json_and_html(self):
        report = self.generator.build_report(self.metrics, "abc", 0, {"final_loss": 0.123456789}, self.records, 4)
        with tempfile.TemporaryDirectory() as tmp:
            json_path = self.generator.write_json(report, str(Path(tmp) / "out" / "report.json"))
            html_path = self.generator.generate_report(report, str(Path(tmp) / "out" / "report.html"), "Planning run")
            loaded = json.loads(Path(json_path).read_text())
            html = Path(html_path).read_text()
        self.assertEqual(loaded["metrics"], self.metrics)
        self.assertIn("<title>Planning run</title>", html)
        self.assertIn("INCOMPLETE", html)
        self.assertIn("Metrics: final", html)
        self.assertIn("press_circle", html)
        self.assertIn("0.1235", html)

    def test_status_labels(self):
        with tempfile.TemporaryDirectory() as tmp:
            ok = Path(self.generator.generate_report(self.generator.build_report({}, "h", 0), str(Path(tmp) / "a.html"))).read_text()
            bad = Path(self.generator.generate_report(self.generator.build_report({}, "h", 0, exit_code=3), str(Path(tmp) / "b.html"))).read_text()
        self.assertIn("SUCCESS", ok)
        self.assertNotIn("Actions", ok)
        self.assertIn("FAILED (Exit code: 3)", bad)


if __name__ == "__main__":
    unittest.main()
