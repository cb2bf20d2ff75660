"""Plain-text tables for fits, bias shares, MDEs and demand capture."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

from metaexp.analyze.power import PowerReport
from metaexp.analyze.regression import BiasDecomposition, RegressionFit

TERM_LABELS = {
    "treatment": "Treatment",
    "bernoulli": "Bernoulli Randomized",
    "bernoulli_x_treatment": "Bernoulli × Treatment",
}
MDE_ROWS = (
    ("treatment", "Treatment"),
    ("bernoulli_x_treatment", "Bernoulli x Treatment"),
    ("bernoulli_arm_treatment", "Bernoulli randomized"),
)


def stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))

    def line(cells):
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join([first, *rest]).rstrip()

    return "\n".join([rule, line(header), rule, *(line(r) for r in rows), rule])


def coefficient_table(fits: Mapping[str, RegressionFit],
                      terms: Sequence[str] = tuple(TERM_LABELS), digits: int = 3) -> str:
    """One column per fit: coefficient with stars, SE in parentheses beneath."""
    columns = list(fits)
    rows = []
    for term in terms:
        if not any(term in f.names for f in fits.values()):
            continue
        coef_row, se_row = [TERM_LABELS.get(term, term)], [""]
        for col in columns:
            fit = fits[col]
            if term in fit.names:
                coef_row.append(f"{fit.coef(term):.{digits}f}{stars(fit.pvalue(term))}")
                se_row.append(f"({fit.se(term):.{digits}f})")
            else:
                coef_row.append("")
                se_row.append("")
        rows += [coef_row, se_row]
    rows.append(["Observations", *(f"{fits[c].n_obs:,}" for c in columns)])
    rows.append(["R²", *(f"{fits[c].r2:.3f}" for c in columns)])
    rows.append(["Adjusted R²", *(f"{fits[c].adj_r2:.3f}" for c in columns)])
    table = _table(["", *columns], rows)
    return table + "\nNote: *p<0.1; **p<0.05; ***p<0.01"


def bias_share_line(decomp: BiasDecomposition) -> str:
    return (f"Interference bias share: {100 * decomp.bias_share:.2f}% "
            f"(±{100 * decomp.bias_share_se:.2f}%) of the Bernoulli-arm effect")


def mde_table(report: PowerReport, digits: int = 3) -> str:
    rows = [[label, f"{report.mde[key]:.{digits}f}"] for key, label in MDE_ROWS if key in report.mde]
    caption = (f"power = {100 * report.power:.0f}%, "
               f"confidence level = {100 * report.confidence:.0f}%")
    return _table(["", "MDE"], rows) + "\n" + caption


def capture_table(ratio_rows: Sequence[Mapping], digits: int = 2) -> str:
    metrics = list(ratio_rows[0]["ratios"]) if ratio_rows else []
    rows = [
        ["yes" if r["single_views"] else "no", r["viewers"],
         *(f"{r['ratios'][m]:.{digits}f}" for m in metrics)]
        for r in ratio_rows
    ]
    return _table(["single views", "viewers", *metrics], rows)
