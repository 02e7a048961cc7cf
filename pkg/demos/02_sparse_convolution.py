#!/usr/bin/env python3
"""Why a sparse convolution is not just a faster dense convolution.

A generalized sparse convolution only produces outputs on the coordinate
map of its input: site (b, x, y) maps to (b, x//s, y//s).  A dense
convolution would also light up neighbours whose receptive field touches a
nonzero; the sparse one leaves them empty, so sparsity survives layer after
layer.  The numbers of operations *and the results* differ.
"""

import numpy as np

from spikesparse.sparse import (
    ConvKernel2D,
    SparseTensor2D,
    count_nonzero,
    dense_conv2d,
    densify,
    out_coords,
    sparse_conv2d,
)

rng = np.random.default_rng(7)

# one lone nonzero in a 7x7 grid
x = SparseTensor2D(np.array([[0, 3, 3]]), np.array([[1.0]]), 1, 7, 7, 1)
kern = ConvKernel2D(rng.standard_normal((1, 1, 3, 3)), stride=1)

sparse_out = sparse_conv2d(x, kern)
dense_out = dense_conv2d(densify(x), kern.weights, stride=1)

print("input sites:", x.coords.tolist())
print("sparse conv output sites:", sparse_out.coords.tolist())
print(f"dense conv nonzero cells: {int(np.count_nonzero(dense_out))} "
      "(the whole 3x3 neighbourhood)")
print("-> the sparse output stays a single site: sparsity is preserved\n")

# the value at the mapped site is the ordinary convolution sum there
np.testing.assert_allclose(sparse_out.values[0, 0], dense_out[0, 0, 3, 3])
print("at the mapped site both agree:", float(sparse_out.values[0, 0]))

# with stride 2 several input sites can merge onto one output site
x2 = SparseTensor2D(np.array([[0, 4, 4], [0, 5, 5], [0, 0, 2]]),
                    np.ones((3, 1)), 1, 8, 8, 1)
print("\nstride-2 coordinate map:", out_coords(x2.coords, 2).tolist())

# nonzero accounting, the efficiency metric of the whole exercise
y = sparse_conv2d(x2, ConvKernel2D(rng.standard_normal((4, 1, 3, 3)), 2))
count, fraction = count_nonzero(y)
print(f"output nonzero scalars: {count} of {y.dense_size} "
      f"({100 * fraction:.1f}% dense)")
