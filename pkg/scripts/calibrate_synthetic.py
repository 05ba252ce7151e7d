"""Recover the reference parameters from a synthetic normal-vol surface generated by the model itself."""

import argparse
import logging

from cbicurves.calibrate import CalibrationProblem, LMConfig, calibrate, synthetic_surface, write_report
from cbicurves.curves import write_surface_csv
from cbicurves.synthetic import flat_curves, table3_params


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bump", type=float, nargs=5, default=[1.2, 0.8, 0.8, 0.8, 0.8],
                    metavar=("B", "SIGMA", "ETA", "THETA", "ALPHA_MINUS_1"),
                    help="multiplicative perturbation of the starting point")
    ap.add_argument("--free", default="b,sigma,eta,theta,alpha")
    ap.add_argument("--max-iter", type=int, default=100)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="calibration")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    truth = table3_params()
    curves = flat_curves()
    surf = synthetic_surface(truth, curves)
    write_surface_csv(f"{a.out}_surface.csv", surf)
    m = truth.mechanism
    fb, fs, fe, ft, fa = a.bump
    init = table3_params(b=m.b * fb, sigma=m.sigma * fs, eta=m.eta * fe, theta=m.theta * ft,
                         alpha=1 + (m.alpha - 1) * fa)
    free = tuple(f.strip() for f in a.free.split(",") if f.strip())
    problem = CalibrationProblem(surf, curves, truth, free=free, threads=a.threads)
    res = calibrate(problem, init, LMConfig(max_iter=a.max_iter, threads=a.threads))
    write_report(res, problem, f"{a.out}_report.json", f"{a.out}_report.csv")
    print(f"rms {res.rms_bp:.3e} bp, {res.iterations} iterations, {res.evaluations} evaluations, "
          f"{res.reason}, {res.wall_time:.0f} s")
    for k in ("b", "sigma", "eta", "theta", "alpha"):
        print(f"{k:6s} true {truth.to_dict()[k]:.6g}  start {init.to_dict()[k]:.6g}  fit {res.params.to_dict()[k]:.6g}")


if __name__ == "__main__":
    main()
