"""Shared hypothesis strategies."""

import numpy as np
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedseg.paramset import ParamSet


def paramsets(dtype=None, min_entries=0, max_entries=4, elements=None):
    """Hypothesis strategy for small ParamSets with unique names."""

    @st.composite
    def build(draw):
        names = draw(st.lists(st.text(min_size=1, max_size=12), min_size=min_entries,
                              max_size=max_entries, unique=True))
        entries = []
        for name in names:
            dt = dtype or draw(st.sampled_from([np.float32, np.float64]))
            shape = draw(hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=4))
            arr = draw(hnp.arrays(dt, shape, elements=elements))
            entries.append((name, arr))
        return ParamSet(entries)

    return build()
