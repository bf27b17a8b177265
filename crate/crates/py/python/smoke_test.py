"""Quick end-to-end check of the Python bindings."""

import csv
import math
import tempfile
from pathlib import Path

import srt_py


def main() -> None:
    assert srt_py.convert_slope(0.0307) == 4.5
    assert abs(srt_py.delta_slope_sii(0.00084) - 0.001188) < 1e-5

    below, above, delta = srt_py.wrs_ci(50)
    assert math.isclose(below, above) and math.isclose(delta, 22.8, abs_tol=0.01)

    f = srt_py.PsychometricFunction(70.0, 4.5)
    assert math.isclose(f.evaluate(70.0), 50.0)
    assert math.isclose(f.level_at(50.0), 70.0)

    cat, area, top = srt_py.categorize([(60, 30), (80, 70), (100, 90)])
    assert cat == "fully_determined" and area == [(60, 30), (80, 70)] and top == (100, 90)

    a = srt_py.Audiogram([None, 10, 15, None, 25, 30, 35, 40, 45])
    assert a.imputed[0] and a.imputed[3]
    curve = a.sii_curve()
    assert curve["converged"] and curve["s_h"] > 0

    rows = srt_py.estimate(a, [(60, 30), (80, 70), (100, 90)])
    assert [r["procedure"] for r in rows] == ["empirical", "sii_slope"]
    assert rows[0]["srt"] == 70.0

    tilt, slope = srt_py.calibrate_sii()
    assert abs(slope - srt_py.S_SII_NH) <= 1e-6

    cohort = srt_py.simulate_cohort(50, seed=3)
    assert len(cohort) == 50 and cohort[0]["id"] == "sim000001"

    report = srt_py.validate(400, seed=2)
    assert {p["procedure"] for p in report["procedures"]} == set(srt_py.PROCEDURES)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        header = ["id", "ear", "gender", "age", "date"]
        header += [f"ag{int(f)}" for f in srt_py.Audiogram.frequencies()]
        header += ["wrs60", "wrs80", "wrs100", "wrs110"]
        with open(tmp / "in.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerow(["a", "left", "", "", "", 10, 10, 15, 20, 25, 30, 35, 40, 45, 30, 70, 90, ""])
            w.writerow(["b", "right", "", "", "", 20, 25, 30, 35, 40, 45, 50, 55, 60, 10, 60, 95, ""])
            w.writerow(["c", "right", "", "", "", 30, 30, 35, 40, 45, 50, 55, 60, 65, 90, "", "", ""])
        flow = srt_py.run_pipeline(tmp / "in.csv", tmp / "out", workers=1)
        assert flow["patients"] == 3
        assert (tmp / "out" / "estimates.csv").is_file()

    try:
        srt_py.run_pipeline("missing.csv", "out")
    except srt_py.SrtError as e:
        assert e.args[1] == 2
    else:
        raise AssertionError("missing input must raise")

    print("smoke test passed")


if __name__ == "__main__":
    main()
