import unittest

from cooklab.bench import SUITES, median_time, run_bench, to_csv

from tests import helpers


class TestBench(unittest.TestCase):

    def test_median_time_calls_warmup_plus_repeats(self):
        calls = []
        seconds = median_time(lambda: calls.append(1), repeats=5)
        self.assertEqual(len(calls), 6)
        self.assertGreaterEqual(seconds, 0.0)

    def test_rows_and_csv(self):
        rows = run_bench(["emd", "neighbors"], seed=0, repeats=1)
        self.assertEqual([r["suite"] for r in rows], ["emd", "neighbors"])
        self.assertEqual([r["n"] for r in rows], [300, 10_000])
        lines = to_csv(rows).splitlines()
        self.assertEqual(lines[0], "suite,n,repeats,median_s")
        self.assertTrue(lines[1].startswith("emd,300,1,"))
        self.assertEqual(len(lines), 3)

    @unittest.skipUnless(helpers.SLOW, "set COOKLAB_SLOW_TESTS=1")
    def test_rollout_suite(self):
        rows = run_bench(["rollout"], repeats=1, registry=helpers.registry())
        self.assertEqual(rows[0]["n"], 15)

    def test_unknown_suite(self):
        self.assertEqual(SUITES, ("emd", "neighbors", "rollout"))
        with self.assertRaises(ValueError):
            run_bench(["fft"], repeats=1)


if __name__ == "__main__":
    unittest.main()
