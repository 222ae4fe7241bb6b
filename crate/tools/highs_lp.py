"""Solve an LP-format model with HiGHS and write `status` plus `name value` lines.

Usage: highs_lp.py MODEL.lp SOLUTION.txt
Exit codes: 0 solved (any status), 3 highspy missing, 4 model unreadable.
"""
import sys

try:
    import highspy
except ImportError:
    sys.stderr.write("highspy is not installed\n")
    sys.exit(3)


def main(model_path, out_path):
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("mip_rel_gap", 0.0)
    h.setOptionValue("mip_abs_gap", 1e-9)
    h.setOptionValue("threads", 1)
    h.setOptionValue("random_seed", 0)
    if h.readModel(model_path) != highspy.HighsStatus.kOk:
        sys.stderr.write("could not read %s\n" % model_path)
        sys.exit(4)
    h.run()
    status = h.modelStatusToString(h.getModelStatus())
    with open(out_path, "w") as f:
        f.write("status %s\n" % status.replace(" ", "_"))
        if status == "Optimal":
            names = h.getLp().col_names_
            for name, value in zip(names, h.getSolution().col_value):
                f.write("%s %r\n" % (name, float(value)))


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.stderr.write(__doc__)
        sys.exit(2)
    main(sys.argv[1], sys.argv[2])
