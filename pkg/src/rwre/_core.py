"""Compiled kernels shared by every module.

Everything random in the package flows through :func:`mix64`, a SplitMix64
finalizer used as a counter-based hash. A site's kernel is a pure function of
``(environment key, site coordinates)``; a walk's ``n``-th step is a pure
function of ``(walk key, n)``. No RNG state is ever carried around.

Direction ``k`` means ``+e_{k//2}`` when ``k`` is even and ``-e_{k//2}``
when ``k`` is odd.
"""
import math

import numpy as np
from numba import njit

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_COORD_OFFSET = 1 << 40
_INV53 = 1.0 / 9007199254740992.0

# model codes
DETERMINISTIC = 0
PERTURBED_SRW = 1
TWO_POINT = 2
DIRICHLET = 3

# region codes
SLAB = 0
DIRECTED_BOX = 1
BLOCK = 2
CONE = 3
BOX_SPEC = 4
FREE = 5

# labels
INTERIOR = 0
RIGHT = 1
OTHER = 2
LEFT = 3
LOST = 4

# transversal modes for slabs
UNBOUNDED = 0
PERIODIC = 1
ABSORBING = 2

_MAX_INT_SHAPE = 64


@njit(cache=True, nogil=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, nogil=True)
def combine(key, value):
    """Fold an unsigned value into a key."""
    return mix64(key ^ (value + _GOLD))


@njit(cache=True, nogil=True)
def to_unit(z):
    """Map a 64-bit word to a double strictly inside (0, 1)."""
    return (np.float64(z >> _S11) + 0.5) * _INV53


@njit(cache=True, nogil=True)
def site_key(key, x):
    h = mix64(key ^ _GOLD)
    for i in range(x.shape[0]):
        u = np.uint64(x[i] + _COORD_OFFSET)
        h = mix64(h ^ (u + _GOLD * np.uint64(i + 1)))
    return h


@njit(cache=True, nogil=True)
def stream_uniform(h, j):
    return to_unit(mix64(h + _GOLD * np.uint64(j + 1)))


# ---------------------------------------------------------------------------
# gamma sampling (inverse CDF, rejection free)


@njit(cache=True, nogil=True)
def _gammp(a, x):
    """Regularized lower incomplete gamma P(a, x)."""
    if x <= 0.0:
        return 0.0
    gln = math.lgamma(a)
    if x < a + 1.0:
        ap = a
        s = 1.0 / a
        d = s
        for _ in range(1000):
            ap += 1.0
            d *= x / ap
            s += d
            if abs(d) < abs(s) * 1e-16:
                break
        return s * math.exp(-x + a * math.log(x) - gln)
    # Lentz continued fraction for Q(a, x)
    fpmin = 1e-300
    b = x + 1.0 - a
    c = 1.0 / fpmin
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < fpmin:
            d = fpmin
        c = b + an / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        de = d * c
        h *= de
        if abs(de - 1.0) < 1e-16:
            break
    return 1.0 - math.exp(-x + a * math.log(x) - gln) * h


@njit(cache=True, nogil=True)
def inv_gammp(a, p):
    """Solve P(a, x) = p for x (Halley iteration, fixed schedule)."""
    if p <= 0.0:
        return 0.0
    gln = math.lgamma(a)
    a1 = a - 1.0
    if a > 1.0:
        lna1 = math.log(a1)
        afac = math.exp(a1 * (lna1 - 1.0) - gln)
        pp = p if p < 0.5 else 1.0 - p
        t = math.sqrt(-2.0 * math.log(pp))
        x = (2.30753 + t * 0.27061) / (1.0 + t * (0.99229 + t * 0.04481)) - t
        if p < 0.5:
            x = -x
        x = max(1e-3, a * (1.0 - 1.0 / (9.0 * a) - x / (3.0 * math.sqrt(a))) ** 3)
    else:
        lna1 = 0.0
        afac = 0.0
        t = 1.0 - a * (0.253 + a * 0.12)
        if p < t:
            x = (p / t) ** (1.0 / a)
        else:
            x = 1.0 - math.log(1.0 - (p - t) / (1.0 - t))
    for _ in range(100):
        if x <= 0.0:
            return 0.0
        err = _gammp(a, x) - p
        if a > 1.0:
            t = afac * math.exp(-(x - a1) + a1 * (math.log(x) - lna1))
        else:
            t = math.exp(-x + a1 * math.log(x) - gln)
        u = err / t
        t = u / (1.0 - 0.5 * min(1.0, u * ((a - 1.0) / x - 1.0)))
        x -= t
        if x <= 0.0:
            x = 0.5 * (x + t)
        if abs(t) < 1e-14 * x:
            break
    return x


@njit(cache=True, nogil=True)
def gamma_variate(h, first_index, alpha):
    """Gamma(alpha) from the hashed stream ``h`` starting at ``first_index``.

    Integer part: sum of exponentials; fractional part: inverse CDF of one
    uniform. Consumes exactly ``floor(alpha) + 1`` stream slots.
    """
    k = int(math.floor(alpha))
    f = alpha - k
    g = 0.0
    for t in range(k):
        g -= math.log(stream_uniform(h, first_index + t))
    if f > 0.0:
        g += inv_gammp(f, stream_uniform(h, first_index + k))
    return g


# ---------------------------------------------------------------------------
# environment kernels


@njit(cache=True, nogil=True)
def kernel_at(mcode, mp, traps, key, x, out):
    d = x.shape[0]
    nd = 2 * d
    if mcode == DETERMINISTIC:
        for k in range(nd):
            out[k] = mp[k]
    elif mcode == PERTURBED_SRW:
        h = site_key(key, x)
        eps = mp[0]
        axis = int(mp[1])
        for k in range(nd):
            out[k] = 1.0 / nd
        u = stream_uniform(h, 0)
        out[2 * axis] += eps * u
        out[2 * axis + 1] -= eps * u
    elif mcode == TWO_POINT:
        h = site_key(key, x)
        u = stream_uniform(h, 0)
        off = 1 if u < mp[0] else 1 + nd
        for k in range(nd):
            out[k] = mp[off + k]
    else:
        h = site_key(key, x)
        kappa = mp[0]
        s = 0.0
        for k in range(nd):
            g = gamma_variate(h, k * _MAX_INT_SHAPE + k, mp[1 + k])
            out[k] = g
            s += g
        for k in range(nd):
            out[k] = kappa + (1.0 - nd * kappa) * out[k] / s
    for t in range(traps.shape[0]):
        _apply_trap_at(traps[t], x, out)


@njit(cache=True, nogil=True)
def _apply_trap_at(trap, x, out):
    d = x.shape[0]
    nd = 2 * d
    radius = trap[0]
    inward = trap[1]
    dist = 0.0
    for i in range(d):
        dist += abs(x[i] - trap[3 + i])
    if dist > radius:
        return
    if dist == 0.0:
        return
    n_in = 0
    for i in range(d):
        if x[i] != trap[3 + i]:
            n_in += 1
    n_out = nd - n_in
    for i in range(d):
        c = trap[3 + i]
        if x[i] > c:
            out[2 * i] = (1.0 - inward) / n_out
            out[2 * i + 1] = inward / n_in
        elif x[i] < c:
            out[2 * i] = inward / n_in
            out[2 * i + 1] = (1.0 - inward) / n_out
        else:
            out[2 * i] = (1.0 - inward) / n_out
            out[2 * i + 1] = (1.0 - inward) / n_out


@njit(cache=True, nogil=True)
def kernels_at_points(mcode, mp, traps, key, pts):
    n, d = pts.shape
    out = np.empty((n, 2 * d))
    for i in range(n):
        kernel_at(mcode, mp, traps, key, pts[i], out[i])
    return out


# ---------------------------------------------------------------------------
# region labels


@njit(cache=True, nogil=True)
def label_at(rcode, rp, x):
    d = x.shape[0]
    if rcode == FREE:
        return INTERIOR
    if rcode == SLAB:
        a = rp[1]
        big_l = rp[2]
        mode = int(rp[3])
        width = rp[4]
        s = 0.0
        for i in range(d):
            s += x[i] * rp[5 + i]
        if s >= big_l:
            return RIGHT
        if s <= -a:
            return LEFT
        if mode == ABSORBING:
            for i in range(d):
                t = x[i] - s * rp[5 + i]
                if abs(t) > width:
                    return OTHER
        return INTERIOR
    if rcode == DIRECTED_BOX:
        big_l = rp[0]
        kk = rp[1]
        s = 0.0
        for i in range(d):
            s += x[i] * rp[2 + i]
        inside = 0.0 <= s <= big_l
        if inside:
            for i in range(d):
                t = x[i] - s * rp[2 + i]
                if abs(t) > kk * big_l:
                    inside = False
                    break
        if inside:
            return INTERIOR
        if s > big_l:
            return RIGHT
        return OTHER
    if rcode == BLOCK:
        n2 = rp[0]
        width = rp[1]
        s = x[0] - rp[2]
        v1 = rp[2 + d]
        inside = -n2 < s < n2
        if inside:
            for i in range(1, d):
                t = (x[i] - rp[2 + i]) - (s / v1) * rp[2 + d + i]
                if not abs(t) < width:
                    inside = False
                    break
        if inside:
            return INTERIOR
        if s >= n2:
            return RIGHT
        return OTHER
    if rcode == CONE:
        lp = rp[0]
        a0 = rp[1]
        slope = rp[2]
        j = int(rp[3])
        s = float(x[j])
        vj = rp[4 + j]
        inside = 0.0 <= s <= lp
        if inside:
            lim = a0 + s * slope
            for i in range(d):
                t = x[i] - (s / vj) * rp[4 + i]
                if abs(t) > lim:
                    inside = False
                    break
        if inside:
            return INTERIOR
        if s > lp:
            return RIGHT
        return OTHER
    # BOX_SPEC: rp = [L, L', Lt, R row-major]
    big_l = rp[0]
    lp = rp[1]
    lt = rp[2]
    lateral_ok = True
    for k in range(1, d):
        y = 0.0
        for i in range(d):
            y += rp[3 + i * d + k] * x[i]
        if not abs(y) < lt:
            lateral_ok = False
            break
    y0 = 0.0
    for i in range(d):
        y0 += rp[3 + i * d] * x[i]
    if lateral_ok and -big_l < y0 < lp:
        return INTERIOR
    if lateral_ok and y0 >= lp:
        return RIGHT
    return OTHER


@njit(cache=True, nogil=True)
def labels_on_box(rcode, rp, lo, shape):
    d = lo.shape[0]
    total = 1
    for i in range(d):
        total *= shape[i]
    labels = np.empty(total, dtype=np.int8)
    x = np.empty(d, dtype=np.int64)
    for flat in range(total):
        r = flat
        for i in range(d - 1, -1, -1):
            x[i] = lo[i] + r % shape[i]
            r //= shape[i]
        labels[flat] = label_at(rcode, rp, x)
    return labels


# ---------------------------------------------------------------------------
# walks


@njit(cache=True, nogil=True)
def _choose(probs, u):
    c = 0.0
    nd = probs.shape[0]
    for k in range(nd - 1):
        c += probs[k]
        if u < c:
            return k
    return nd - 1


@njit(cache=True, nogil=True)
def walk(mcode, mp, traps, env_key, wrap, rcode, rp, start, step_cap,
         walk_key, moves, record):
    """Run one quenched walk. Returns (steps taken, final label, final x)."""
    d = start.shape[0]
    x = start.copy()
    xe = np.empty(d, dtype=np.int64)
    probs = np.empty(2 * d)
    n = 0
    lab = label_at(rcode, rp, x)
    while lab == INTERIOR and n < step_cap:
        for i in range(d):
            if wrap[i] > 0:
                xe[i] = x[i] % wrap[i]
            else:
                xe[i] = x[i]
        kernel_at(mcode, mp, traps, env_key, xe, probs)
        u = to_unit(mix64(walk_key + _GOLD * np.uint64(n + 1)))
        k = _choose(probs, u)
        if record:
            moves[n] = k
        if k % 2 == 0:
            x[k // 2] += 1
        else:
            x[k // 2] -= 1
        n += 1
        lab = label_at(rcode, rp, x)
    return n, lab, x


# ---------------------------------------------------------------------------
# solvers on an explicit grid


@njit(cache=True, nogil=True)
def grid_neighbours(labels, shape, wrap_axes, interior):
    """Flat neighbour cell indices for each interior cell (periodic aware)."""
    d = shape.shape[0]
    n = interior.shape[0]
    strides = np.empty(d, dtype=np.int64)
    s = 1
    for i in range(d - 1, -1, -1):
        strides[i] = s
        s *= shape[i]
    nbr = np.empty((n, 2 * d), dtype=np.int64)
    coord = np.empty(d, dtype=np.int64)
    for m in range(n):
        flat = interior[m]
        r = flat
        for i in range(d - 1, -1, -1):
            coord[i] = r % shape[i]
            r //= shape[i]
        for i in range(d):
            for sgn in range(2):
                step = 1 if sgn == 0 else -1
                c = coord[i] + step
                if wrap_axes[i]:
                    c = c % shape[i]
                nbr[m, 2 * i + sgn] = flat + (c - coord[i]) * strides[i]
    return nbr


@njit(cache=True, nogil=True)
def gs_backward(nbr, probs, interior, values, tol, max_iter, symmetric):
    """Gauss-Seidel for h = P h on interior cells, boundary cells fixed.

    ``values`` has shape (n_cells, K) and is updated in place. Sweeps run in
    lexicographic order, alternating with the reverse order when
    ``symmetric`` is set. Returns (sweeps, last max update).
    """
    n = interior.shape[0]
    nd = nbr.shape[1]
    kk = values.shape[1]
    it = 0
    delta = np.inf
    while it < max_iter:
        delta = 0.0
        forward = (not symmetric) or (it % 2 == 0)
        for q in range(n):
            m = q if forward else n - 1 - q
            cell = interior[m]
            for c in range(kk):
                acc = 0.0
                for e in range(nd):
                    acc += probs[m, e] * values[nbr[m, e], c]
                diff = abs(acc - values[cell, c])
                if diff > delta:
                    delta = diff
                values[cell, c] = acc
        it += 1
        if delta <= tol:
            break
    return it, delta


@njit(cache=True, nogil=True)
def jacobi_backward(nbr, probs, interior, values, tol, max_iter):
    n = interior.shape[0]
    nd = nbr.shape[1]
    kk = values.shape[1]
    new = np.empty((n, kk))
    it = 0
    delta = np.inf
    while it < max_iter:
        delta = 0.0
        for m in range(n):
            cell = interior[m]
            for c in range(kk):
                acc = 0.0
                for e in range(nd):
                    acc += probs[m, e] * values[nbr[m, e], c]
                new[m, c] = acc
                diff = abs(acc - values[cell, c])
                if diff > delta:
                    delta = diff
        for m in range(n):
            for c in range(kk):
                values[interior[m], c] = new[m, c]
        it += 1
        if delta <= tol:
            break
    return it, delta


@njit(cache=True, nogil=True)
def backward_residual(nbr, probs, interior, values):
    n = interior.shape[0]
    nd = nbr.shape[1]
    res = 0.0
    for m in range(n):
        cell = interior[m]
        for c in range(values.shape[1]):
            acc = 0.0
            for e in range(nd):
                acc += probs[m, e] * values[nbr[m, e], c]
            r = abs(acc - values[cell, c])
            if r > res:
                res = r
    return res


@njit(cache=True, nogil=True)
def incoming_table(nbr, cell_to_int):
    """inc[m, e]: interior index of the site stepping into m along e, or -1."""
    n, nd = nbr.shape
    inc = np.full((n, nd), -1, dtype=np.int64)
    for m in range(n):
        for e in range(nd):
            opp = e + 1 if e % 2 == 0 else e - 1
            src = cell_to_int[nbr[m, opp]]
            inc[m, e] = src
    return inc


@njit(cache=True, nogil=True)
def _adjoint_update(m, start, inc, probs, occ):
    acc = 1.0 if m == start else 0.0
    for e in range(inc.shape[1]):
        src = inc[m, e]
        if src >= 0:
            acc += occ[src] * probs[src, e]
    return acc


@njit(cache=True, nogil=True)
def gs_adjoint(inc, probs, start, occ, tol, max_iter, symmetric):
    """Gauss-Seidel for the occupation measure G = delta_start + P^T G."""
    n = inc.shape[0]
    it = 0
    delta = np.inf
    while it < max_iter:
        delta = 0.0
        scale = 1.0
        forward = (not symmetric) or (it % 2 == 0)
        for q in range(n):
            m = q if forward else n - 1 - q
            acc = _adjoint_update(m, start, inc, probs, occ)
            diff = abs(acc - occ[m])
            if diff > delta:
                delta = diff
            if acc > scale:
                scale = acc
            occ[m] = acc
        it += 1
        if delta <= tol * scale:
            break
    return it, delta


@njit(cache=True, nogil=True)
def jacobi_adjoint(inc, probs, start, occ, tol, max_iter):
    n = inc.shape[0]
    new = np.empty(n)
    it = 0
    delta = np.inf
    while it < max_iter:
        delta = 0.0
        scale = 1.0
        for m in range(n):
            acc = _adjoint_update(m, start, inc, probs, occ)
            new[m] = acc
            diff = abs(acc - occ[m])
            if diff > delta:
                delta = diff
            if acc > scale:
                scale = acc
        for m in range(n):
            occ[m] = new[m]
        it += 1
        if delta <= tol * scale:
            break
    return it, delta


@njit(cache=True, nogil=True)
def adjoint_residual(inc, probs, start, occ):
    res = 0.0
    scale = 1.0
    for m in range(inc.shape[0]):
        acc = _adjoint_update(m, start, inc, probs, occ)
        r = abs(acc - occ[m])
        if r > res:
            res = r
        if occ[m] > scale:
            scale = occ[m]
    return res / scale


@njit(cache=True, nogil=True)
def absorbed_mass(nbr, probs, cell_to_int, occ, n_cells):
    mass = np.zeros(n_cells)
    for m in range(nbr.shape[0]):
        for e in range(nbr.shape[1]):
            c = nbr[m, e]
            if cell_to_int[c] < 0:
                mass[c] += occ[m] * probs[m, e]
    return mass


@njit(cache=True, nogil=True)
def walk_batch(mcode, mp, traps, trapped, env_keys, walk_keys, wrap, rcode, rp,
               start, step_cap, moves):
    """Run one walk per (env key, walk key) pair.

    ``trapped[r]`` selects whether replica ``r`` sees ``traps``. When
    ``moves`` has a row per replica the moves are recorded there.
    """
    r_count = env_keys.shape[0]
    d = start.shape[0]
    steps = np.empty(r_count, dtype=np.int64)
    labels = np.empty(r_count, dtype=np.int8)
    finals = np.empty((r_count, d), dtype=np.int64)
    record = moves.shape[0] == r_count and moves.shape[1] >= step_cap
    no_traps = traps[:0]
    for r in range(r_count):
        tr = traps if trapped[r] else no_traps
        row = moves[r] if record else moves[0]
        n, lab, x = walk(mcode, mp, tr, env_keys[r], wrap, rcode, rp, start,
                         step_cap, walk_keys[r], row, record)
        steps[r] = n
        labels[r] = lab
        for i in range(d):
            finals[r, i] = x[i]
    return steps, labels, finals


@njit(cache=True, nogil=True)
def positions_from_moves(start, moves, n):
    d = start.shape[0]
    pos = np.empty((n + 1, d), dtype=np.int64)
    for i in range(d):
        pos[0, i] = start[i]
    for t in range(n):
        for i in range(d):
            pos[t + 1, i] = pos[t, i]
        k = moves[t]
        if k % 2 == 0:
            pos[t + 1, k // 2] += 1
        else:
            pos[t + 1, k // 2] -= 1
    return pos


@njit(cache=True, nogil=True)
def regen_scan(pos, horizon):
    """Finite-horizon regeneration times of a path ``pos`` (shape (n+1, d)).

    ``t >= 1`` is accepted when ``pos[t, 0]`` is a strict running maximum and
    no index in ``(t, min(n, t + horizon)]`` has a smaller e_1 coordinate.
    Returns (times, radii, confirmed) where confirmed means t + horizon <= n.
    """
    n = pos.shape[0] - 1
    d = pos.shape[1]
    # next strictly smaller e_1 value to the right (monotone stack)
    nxt = np.full(n + 1, n + 1, dtype=np.int64)
    stack = np.empty(n + 1, dtype=np.int64)
    top = 0
    for t in range(n + 1):
        v = pos[t, 0]
        while top > 0 and pos[stack[top - 1], 0] > v:
            top -= 1
            nxt[stack[top]] = t
        stack[top] = t
        top += 1
    times = np.empty(n, dtype=np.int64)
    count = 0
    best = pos[0, 0]
    for t in range(1, n + 1):
        v = pos[t, 0]
        if v > best:
            best = v
            if nxt[t] > min(n, t + horizon):
                times[count] = t
                count += 1
    times = times[:count]
    radii = np.zeros(count, dtype=np.int64)
    confirmed = np.empty(count, dtype=np.bool_)
    prev = 0
    for k in range(count):
        tk = times[k]
        r = 0
        for m in range(prev, tk + 1):
            s = 0
            for i in range(d):
                s += abs(pos[m, i] - pos[prev, i])
            if s > r:
                r = s
        radii[k] = r
        confirmed[k] = tk + horizon <= n
        prev = tk
    return times, radii, confirmed
