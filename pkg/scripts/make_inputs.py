"""Write the reference parameter file, synthetic curves and a synthetic vol surface for the CLI."""

import argparse
from pathlib import Path

from cbicurves.calibrate import synthetic_surface
from cbicurves.curves import write_discount_csv, write_forward_csv, write_surface_csv
from cbicurves.synthetic import flat_curves, sloped_curves, table3_params


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--curves", choices=("flat", "sloped"), default="flat")
    ap.add_argument("--surface", action="store_true", help="also write a synthetic normal-vol surface (slow)")
    ap.add_argument("--out", default="inputs")
    a = ap.parse_args()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    params = table3_params()
    curves = flat_curves() if a.curves == "flat" else sloped_curves()
    params.write(out / "params.json")
    write_discount_csv(out / "ois.csv", curves.discount)
    for fc in curves.forwards:
        write_forward_csv(out / f"fwd_{int(round(fc.tenor * 12))}M.csv", fc)
    if a.surface:
        write_surface_csv(out / "surface.csv", synthetic_surface(params, curves))
    print(f"wrote inputs to {out}/")


if __name__ == "__main__":
    main()
