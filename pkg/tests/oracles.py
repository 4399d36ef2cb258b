"""Independent brute-force references the metric tests compare against.

Everything here is written the slow, obvious way on purpose: exhaustive path
enumeration for DTW, an O(n^2) DFT for modulation spectra, scalar loops for
distances. No shared code with the package internals beyond numpy.
"""

import math

import numpy as np


def euclidean(a, b):
    return math.sqrt(float(((np.asarray(a) - np.asarray(b)) ** 2).sum()))


def dtw_all_paths(ta: int, tb: int):
    """Every monotone path of (diag, down, right) steps from (0,0) to (ta-1,tb-1)."""
    paths = []

    def walk(i, j, acc):
        if (i, j) == (ta - 1, tb - 1):
            paths.append(acc + [(i, j)])
            return
        if i + 1 < ta and j + 1 < tb:
            walk(i + 1, j + 1, acc + [(i, j)])
        if i + 1 < ta:
            walk(i + 1, j, acc + [(i, j)])
        if j + 1 < tb:
            walk(i, j + 1, acc + [(i, j)])

    walk(0, 0, [])
    return paths


def dtw_bruteforce_cost(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum summed local cost over every admissible path, (0,0) included."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    best = math.inf
    for path in dtw_all_paths(a.shape[0], b.shape[0]):
        cost = sum(euclidean(a[i], b[j]) for i, j in path)
        best = min(best, cost)
    return best


def naive_log_modulation_spectrum(frames: np.ndarray, fft_len: int) -> np.ndarray:
    """[D, fft_len // 2 + 1] log10 power spectrum via an explicit DFT sum."""
    frames = np.asarray(frames, dtype=np.float64)
    t, d = frames.shape
    centered = frames - frames.mean(axis=0, keepdims=True)
    padded = np.zeros((fft_len, d))
    padded[:t] = centered
    bins = fft_len // 2 + 1
    out = np.zeros((d, bins))
    for dim in range(d):
        for k in range(bins):
            re = sum(padded[n, dim] * math.cos(-2.0 * math.pi * k * n / fft_len)
                     for n in range(fft_len))
            im = sum(padded[n, dim] * math.sin(-2.0 * math.pi * k * n / fft_len)
                     for n in range(fft_len))
            out[dim, k] = math.log10(max(re * re + im * im, 1e-10))
    return out


def mcd_scalar(c: np.ndarray, t: np.ndarray, pairs) -> float:
    const = 10.0 / math.log(10.0) * math.sqrt(2.0)
    total = 0.0
    for i, j in pairs:
        total += const * euclidean(c[i], t[j])
    return total / len(pairs)


def gv_scalar(frame_stacks) -> np.ndarray:
    pooled = np.vstack(frame_stacks)
    mean = pooled.mean(axis=0)
    return ((pooled - mean) ** 2).mean(axis=0)
