#!/usr/bin/env python3
from faireval import REFERENCE_RESULTS, compare_reports, group_report

for (table, loss, dataset), row in REFERENCE_RESULTS.items():
    report = group_report(row["per_group"], loss=loss, dataset=dataset)
    matches = (report.avg, report.stdv) == (row["avg"], row["stdv"])
    mark = "✅" if matches else "⚠️ "
    print(
        f"{mark} {table:<11} {loss:<8} {dataset:<22} "
        f"AVG {report.avg:6.2f} STDV {report.stdv:5.2f}"
    )
    if table != "imbalanced":
        assert matches


def softmax_report(dataset):
    row = REFERENCE_RESULTS[("balanced", "softmax", dataset)]
    return group_report(row["per_group"], loss="softmax")


baseline = softmax_report("VGGFace2 1200")
treated = softmax_report("VGGFace2 1200 Races")
delta = compare_reports(baseline, treated)
print(f"✅ Softmax ΔSTDV {delta.d_stdv:+.2f}")
assert delta.d_stdv == -0.21
