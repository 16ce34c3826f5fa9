import numpy as np

from volharm.descriptors import FEATURE_NAMES, FeatureVector
from volharm.records import SubjectRecord
from volharm.synth import DEFAULT_BASELINE

NMI = FEATURE_NAMES.index("nmi")


def planted_cohort(n=600, coeff=3.0, seed=0, noise=0.0, gm_slope=-2.0):
    """Cohort whose GM deviates from its age trend by exactly ``coeff * (nmi - 1.2)``."""
    rng = np.random.default_rng(seed)
    ages = rng.uniform(20, 80, n)
    feats = DEFAULT_BASELINE + 0.05 * rng.normal(size=(n, 16))
    feats[:, NMI] = 1.2 + 0.5 * rng.normal(size=n)
    gm = 650 + gm_slope * (ages - 50) + coeff * (feats[:, NMI] - 1.2) + noise * rng.normal(size=n)
    wm = 500 - 1.0 * (ages - 50) + noise * rng.normal(size=n)
    return [
        SubjectRecord(
            subject_id=f"s{i:04d}", scan_id=f"s{i:04d}_1", features=FeatureVector.from_array(feats[i]),
            gm_ml=float(gm[i]), wm_ml=float(wm[i]), age=float(ages[i]), scanner_id=f"scanner-{i % 3}",
        )
        for i in range(n)
    ]
