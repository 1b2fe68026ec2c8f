"""Recomputes the balance goldens for the twelve-subject fixture.

Reads cohort.csv and design.golden.csv directly and writes
balance.golden.csv and balance.golden.plots.json. Shares no code with the
Rust implementation.
"""
import csv
import json
import math
import os

HERE = os.path.dirname(os.path.abspath(__file__))
VARS = ["region", "race", "event_time[1]", "event_time[k]", "education[k]"]
OUTCOMES = ["children", "work"]


def g17(x):
    return "0" if x == 0 else "%.17g" % x


def rows(path):
    with open(path, newline="") as f:
        assert f.readline().strip() == "#isolate-schema=1"
        return list(csv.DictReader(f))


subjects = {}
for r in rows(os.path.join(HERE, "cohort.csv")):
    s = subjects.setdefault(r["subject_id"], {"fixed": {}, "out": {}, "ev": {}})
    if r["row"] == "S":
        s["fixed"] = {"race": r["fixed:race"], "region": r["fixed:region"]}
        s["out"] = {"children": float(r["outcome:children"]), "work": float(r["outcome:work"])}
    else:
        s["ev"][int(r["k"])] = {"time": float(r["time"]), "education": float(r["tv:education"])}

sets = []
for r in rows(os.path.join(HERE, "design.golden.csv")):
    if r["arm"] == "treated":
        sets.append({"k": int(r["k"]), "stratum": dict(p.split("=") for p in r["stratum"].split("|")), "m": []})
    sets[-1]["m"].append(r["subject_id"])
J = len(sets[0]["m"])


def value(var, sid, k):
    s = subjects[sid]
    if var in ("race",):
        return s["fixed"][var]
    name, idx = var[:-1].split("[")
    j = k if idx == "k" else int(idx)
    key = "time" if name == "event_time" else name
    return s["ev"][j][key]


def mean_var(x):
    n = len(x)
    m = sum(x) / n
    v = sum((a - m) * (a - m) for a in x) / (n - 1) if n > 1 else 0.0
    return m, v


def sd(mt, vt, mc, vc):
    p = math.sqrt((vt + vc) / 2)
    if p > 0:
        return g17((mt - mc) / p)
    return "0" if mt == mc else ""


out = [["variable", "level", "k", "kind", "exact", "treated_n", "control_n", "treated_count",
        "control_count", "treated_value", "control_value", "std_diff"]]
ks = sorted({s["k"] for s in sets})
for var in VARS:
    exact = var in sets[0]["stratum"]
    for k in ks + [None]:
        group = [s for s in sets if k is None or s["k"] == k]
        t, c = [], []
        for s in group:
            for i, sid in enumerate(s["m"]):
                v = s["stratum"][var] if exact else value(var, sid, s["k"])
                (t if i == 0 else c).append(v)
        kk = "all" if k is None else str(k)
        if isinstance(t[0], float):
            mt, vt = mean_var(t)
            mc, vc = mean_var(c)
            out.append([var, "mean", kk, "numeric", "false", len(t), len(c), "", "",
                        g17(mt), g17(mc), sd(mt, vt, mc, vc)])
        else:
            for level in sorted(set(t) | set(c)):
                ct, cc = t.count(level), c.count(level)
                if exact:
                    assert cc == (J - 1) * ct
                pt, pc = ct / len(t), cc / len(c)
                out.append([var, level, kk, "categorical", str(exact).lower(), len(t), len(c), ct, cc,
                            g17(100 * pt), g17(100 * pc), sd(pt, pt * (1 - pt), pc, pc * (1 - pc))])

with open(os.path.join(HERE, "balance.golden.csv"), "w", newline="") as f:
    f.write("#isolate-schema=1\n")
    csv.writer(f, lineterminator="\n").writerows(out)


def q7(x, p):
    h = (len(x) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(x) - 1)
    return x[lo] + (h - lo) * (x[hi] - x[lo])


def med(x):
    n = len(x)
    return x[n // 2] if n % 2 else (x[n // 2 - 1] + x[n // 2]) / 2


def five(x):
    x = sorted(x)
    h = (len(x) + 1) // 2
    return {"min": x[0], "lower_hinge": med(x[:h]), "median": med(x),
            "upper_hinge": med(x[len(x) - h:]), "max": x[-1]}


plots = []
for y in OUTCOMES:
    qq = []
    for k in [None] + ks:
        group = [s for s in sets if k is None or s["k"] == k]
        t = sorted(subjects[s["m"][0]]["out"][y] for s in group)
        c = sorted(subjects[m]["out"][y] for s in group for m in s["m"][1:])
        n = len(t)
        pts = [{"treated": v, "control": q7(c, 0.5 if n == 1 else i / (n - 1))} for i, v in enumerate(t)]
        qq.append({"k": k, "points": pts})
    box = []
    for k in ks:
        for arm, sl in (("treated", slice(0, 1)), ("control", slice(1, None))):
            v = [subjects[m]["out"][y] for s in sets if s["k"] == k for m in s["m"][sl]]
            box.append({"k": k, "arm": arm, "n": len(v), **five(v)})
    plots.append({"outcome": y, "qq": qq, "boxplots": box})

with open(os.path.join(HERE, "balance.golden.plots.json"), "w") as f:
    json.dump(plots, f, indent=2)
    f.write("\n")
