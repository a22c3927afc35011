"""Random model factories shared by the test modules."""

import numpy as np

from mtgpfuse import kernels as K
from mtgpfuse.multitask import MtgpModel


def random_params(rng, fam, d, lo=0.4, hi=2.5):
    fam = K.KernelFamily.parse(fam)
    bias = float(rng.uniform(lo, hi)) if fam is K.KernelFamily.NN else None
    return K.KernelParams(fam, rng.uniform(lo, hi, d), bias=bias)


def random_similarity(rng, nt, scale=1.0):
    L = np.tril(rng.normal(size=(nt, nt))) * scale
    L[np.diag_indices(nt)] = np.abs(L[np.diag_indices(nt)]) + 0.1
    return K.TaskSimilarity(L)


def random_mtgp(rng, families, sizes, d=3, noise=(0.01, 0.2), extent=3.0):
    params = [random_params(rng, f, d) for f in families]
    X = [rng.uniform(-extent, extent, (n, d)) for n in sizes]
    z = [rng.normal(size=n) for n in sizes]
    noises = rng.uniform(*noise, len(families))
    offsets = rng.normal(size=len(families))
    return MtgpModel(params, random_similarity(rng, len(families)), noises, X, z, offsets)
