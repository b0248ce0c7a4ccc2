"""Independent brute-force references used by the equivalence tests."""
import numpy as np


def iss_bruteforce(P, salient_radius=1.0, nms_radius=0.5, gamma21=0.9, gamma32=0.9, min_neighbors=10):
    """Indices of ISS keypoints by explicit per-point loops (descending saliency)."""
    P = np.asarray(P, dtype=np.float64)
    n = len(P)
    l3 = np.zeros(n)
    ok = np.zeros(n, dtype=bool)
    for i in range(n):
        nb = P[np.linalg.norm(P - P[i], axis=1) <= salient_radius]
        if len(nb) < min_neighbors:
            continue
        C = np.cov(nb.T, bias=True)
        w = np.sort(np.linalg.eigvalsh(C))[::-1]
        l3[i] = max(w[2], 0.0)
        ok[i] = w[0] > 0 and w[1] > 0 and w[1] / w[0] < gamma21 and w[2] / w[1] < gamma32
    cand = [i for i in np.argsort(-l3, kind="stable") if ok[i]]
    kept = []
    for i in cand:
        if all(np.linalg.norm(P[i] - P[j]) > nms_radius for j in kept):
            kept.append(i)
    return kept


def knn_bruteforce(X, q, k):
    d = np.array([np.sqrt(((x - q) ** 2).sum()) for x in X])
    order = sorted(range(len(X)), key=lambda i: (d[i], i))[:k]
    return np.array(order), d[order]


def pnp_problem(rng, n, K, depth=(2.0, 50.0), noise_px=0.0):
    """Random camera pose and n world points seen in front of it.

    Points are drawn in the camera frame (uniform pixel, uniform depth) and
    mapped to the world with the inverse of the ground-truth pose, so their
    projections are known exactly before noise is added.

    Returns:
        (pose, world points (n, 3), pixels (n, 2))
    """
    from crossloc.geometry import PoseSE3, random_rotation

    R = random_rotation(rng)
    t = rng.uniform(-20, 20, size=3)
    pose = PoseSE3(R, t)
    u = rng.uniform(0, K.width, n)
    v = rng.uniform(0, K.height, n)
    z = rng.uniform(*depth, n)
    Xc = np.stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z], axis=1)
    Xw = (Xc - t) @ R  # R^T (Xc - t)
    px = np.stack([u, v], axis=1) + rng.normal(scale=noise_px, size=(n, 2)) if noise_px else np.stack([u, v], axis=1)
    return pose, Xw, px


def decoy_hypotheses(rng, K, n_true=40, n_decoy=40, k=5):
    """Top-k candidate lists for true keypoints (true point at a random rank) and decoys.

    Decoy keypoints get a random pixel and k random map points. Returns the
    ground-truth pose, the shuffled hypothesis list and the positions of the
    true keypoints in that list.
    """
    from crossloc.detect2d import Keypoint2D
    from crossloc.detect3d import Keypoint3D
    from crossloc.matching import MatchHypothesis

    pose, Xw, px = pnp_problem(rng, n_true, K)
    lo, hi = Xw.min(0) - 5, Xw.max(0) + 5

    def rand_pt():
        return Keypoint3D(rng.uniform(lo, hi), 1.0)

    hyps = []
    for X, (u, v) in zip(Xw, px):
        cands = [rand_pt() for _ in range(k - 1)]
        cands.insert(int(rng.integers(k)), Keypoint3D(X, 1.0))
        hyps.append(MatchHypothesis(Keypoint2D(u, v, 1.0), tuple((c, 0.1 * i) for i, c in enumerate(cands))))
    for _ in range(n_decoy):
        uv = rng.uniform([0, 0], [K.width, K.height])
        hyps.append(MatchHypothesis(Keypoint2D(uv[0], uv[1], 1.0),
                                    tuple((rand_pt(), 0.1 * i) for i in range(k))))
    order = rng.permutation(len(hyps))
    true_idx = {int(j) for j in np.nonzero(order < n_true)[0]}
    return pose, [hyps[i] for i in order], true_idx
