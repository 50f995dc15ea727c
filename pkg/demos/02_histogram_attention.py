"""A walk through histogram self-attention on a toy feature map.

Run:  python3 demos/02_histogram_attention.py

Pixels are grouped by intensity instead of position: each channel is sorted,
the sorted sequence is cut into bins, attention runs inside every bin, and the
result is scattered back to the original pixel positions.
"""
import numpy as np

from hfrestore import blocks as B
from hfrestore import tensor as T
from hfrestore.tensor import Tensor

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

# One channel, 4x4 pixels.
v = Tensor(rng.uniform(size=(1, 4, 4)))
print("values V:\n", v.data[0])

# Sorting keeps the permutation so the result can be put back exactly.
flat = T.reshape(v, (1, 16))
sorted_v, order = T.sort_with_index(flat, axis=1)
print("\nsorted V:", sorted_v.data[0])
print("order:   ", order.order[0])
assert np.array_equal(T.scatter(sorted_v, order).data, flat.data)

# Two ways to bin 16 sorted values.
#   BHR: a fixed number of bins (4 here), each holding a run of similar values.
#   FHR: bins of a fixed size (2 here), so there are 8 narrow bins.
print("\nBHR bins:\n", B.bin_reshape(sorted_v, 4, "bhr").data[0])
print("FHR bins:\n", B.bin_reshape(sorted_v, 2, "fhr").data[0])

# Values that do not fill the last bin are padded by repeating the last one.
odd = Tensor(np.arange(10.0).reshape(1, 10))
print("\n10 values into 4 bins:\n", B.bin_reshape(odd, 4, "bhr").data[0])

# Full histogram attention on two channels.  Queries and keys come in pairs
# of channels (2C) and are reordered with V's permutation before binning.
c = 2
v = Tensor(rng.normal(size=(c, 4, 4)))
fqk1 = Tensor(rng.normal(size=(2 * c, 4, 4)))
fqk2 = Tensor(rng.normal(size=(2 * c, 4, 4)))
out = B.histogram_attention(v, fqk1, fqk2, B.HistConfig(bins=4, bin_frequency=2), B.AttentionConfig(1, c))
print("\nattention output (channel 0):\n", out.data[0])

# With one element per bin every token only sees itself, so the BHR branch
# returns sorted V unchanged.
vs = Tensor(np.sort(rng.normal(size=(c, 16)), axis=1))
same = B.binned_attention(Tensor(rng.normal(size=(c, 16))), Tensor(rng.normal(size=(c, 16))), vs, 16, "bhr", 1)
assert np.array_equal(same.data, vs.data)
print("\nsingleton bins reproduce sorted V exactly")

# The dynamic-range conv sorts half the channels along rows then columns
# before the 1x1 / depthwise convs, which makes similar intensities adjacent.
f = Tensor(rng.normal(size=(4, 4, 4)))
s, idx_h, idx_v = B.sort_rows_cols(T.slice_axis(f, 0, 2, axis=0))
print("\nrow/column sorted channel 0:\n", s.data[0])
assert np.array_equal(B.unsort_rows_cols(s, idx_h, idx_v).data, f.data[:2])
