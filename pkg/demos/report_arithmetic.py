"""Rebuild the headline percentages from raw counts.

Run:  python3 demos/report_arithmetic.py

Outcome records are synthesized so that the per-condition totals equal the
published counts; the report then derives every percentage itself.
"""
from lemmamine.evaluation import EvalOutcome, build_report, improvement, render_report


def outcomes(project, base_proved, base_tactics, enh_proved, enh_tactics):
    # Spread tactics evenly: first over the baseline-proved theorems, then
    # over the theorems only the enhanced run proves.
    def spread(total, n):
        q, r = divmod(total, n)
        return [q + (i < r) for i in range(n)]

    tactics = spread(base_tactics, base_proved) + spread(enh_tactics - base_tactics, enh_proved - base_proved)
    out = []
    for i, t in enumerate(tactics):
        tid = f"{project}/F.v/t{i}"
        out.append(EvalOutcome(tid, "baseline", "proved" if i < base_proved else "failed", 0, t, project))
        out.append(EvalOutcome(tid, "enhanced", "proved", 0, t, project))
    return out


claude = {"CompCert": (293, 1065, 345, 1436), "Ext-Lib": (78, 265, 82, 301),
          "Coq-Art": (446, 1160, 501, 1416), "Vfa": (63, 133, 70, 159)}
o3mini = {"CompCert": (293, 1065, 332, 1320), "Ext-Lib": (78, 265, 82, 294),
          "Coq-Art": (446, 1160, 504, 1377), "Vfa": (63, 133, 69, 146)}

for label, table in (("extraction with claude-3.7", claude), ("extraction with o3-mini", o3mini)):
    outs = [o for p, counts in table.items() for o in outcomes(p, *counts)]
    print(f"## {label}\n")
    print(render_report(build_report(outs, list(table))))

# Half-up rounding at two decimals: 1416/1160 - 1 = 22.0689...% -> 22.07%.
print("Coq-Art tactics:", improvement(1160, 1416))
