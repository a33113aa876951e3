"""
Test runner for jumplan.
Discovers every tests/test_*.py module and prints a summary.

Slow desk-scale acceptance runs are skipped unless JUMPLAN_ACCEPTANCE=1.
"""
import sys
import os
import unittest

# Add project root to path
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))


def run_tests():
    """Run all tests and return results."""
    loader = unittest.TestLoader()
    suite = loader.discover(os.path.join(os.path.dirname(os.path.abspath(__file__)), 'tests'),
                            top_level_dir=os.path.dirname(os.path.abspath(__file__)))
    runner = unittest.TextTestRunner(verbosity=2)
    return runner.run(suite)


if __name__ == '__main__':
    print("=" * 70)
    print("Running jumplan tests")
    print("=" * 70)
    print()

    result = run_tests()

    print()
    print("=" * 70)
    print("Test Summary:")
    print(f"  Tests Run: {result.testsRun}")
    print(f"  Successes: {result.testsRun - len(result.failures) - len(result.errors)}")
    print(f"  Failures: {len(result.failures)}")
    print(f"  Errors: {len(result.errors)}")
    print(f"  Skipped: {len(result.skipped)}")
    print("=" * 70)

    sys.exit(0 if result.wasSuccessful() else 1)
