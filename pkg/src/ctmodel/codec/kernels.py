"""Numba kernels for the hot loops of the codec.

Every grid is handled as 3-D; lower-rank fields are padded with leading
unit extents, which makes the 3-D Lorenzo stencil collapse to the 2-D and
1-D stencils because out-of-range neighbours read as zero.
"""

import numpy as np
from numba import njit

CUBIC = 0
LINEAR = 1
COPY = 2


@njit(inline="always")
def _quantize(x, pred, eb, twoeb, inv, radius):
    q = np.floor((x - pred) * inv + 0.5)
    if abs(q) < radius:
        r = pred + twoeb * q
        if abs(r - x) <= eb:
            return np.int32(q) + np.int32(radius), r
    return np.int32(0), x


# ---------------------------------------------------------------- Lorenzo

@njit(cache=True)
def lorenzo_quantize(data, eb, radius, codes, outliers, rec):
    """Quantize ``data`` (3-D) in place into ``codes``; returns outlier count.

    ``rec`` is zeroed scratch of shape ``data.shape + 1`` per axis.
    """
    n0, n1, n2 = data.shape
    twoeb = 2.0 * eb
    inv = 1.0 / twoeb
    nout = 0
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                pred = (rec[i, j + 1, k + 1] + rec[i + 1, j, k + 1] + rec[i + 1, j + 1, k]
                        - rec[i, j, k + 1] - rec[i, j + 1, k] - rec[i + 1, j, k]
                        + rec[i, j, k])
                x = data[i, j, k]
                c, r = _quantize(x, pred, eb, twoeb, inv, radius)
                codes[i, j, k] = c
                if c == 0:
                    outliers[nout] = x
                    nout += 1
                rec[i + 1, j + 1, k + 1] = r
    return nout


@njit(cache=True)
def lorenzo_reconstruct(codes, outliers, eb, radius, out, rec):
    n0, n1, n2 = codes.shape
    twoeb = 2.0 * eb
    used = 0
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                c = codes[i, j, k]
                if c == 0:
                    if used >= outliers.size:
                        return -1
                    r = outliers[used]
                    used += 1
                else:
                    pred = (rec[i, j + 1, k + 1] + rec[i + 1, j, k + 1] + rec[i + 1, j + 1, k]
                            - rec[i, j, k + 1] - rec[i, j + 1, k] - rec[i + 1, j, k]
                            + rec[i, j, k])
                    r = pred + twoeb * np.float64(c - radius)
                rec[i + 1, j + 1, k + 1] = r
                out[i, j, k] = r
    return used


# ---------------------------------------------------------- interpolation

@njit(inline="always")
def _interp_predict(rec, p, c, n, step):
    # c: coordinate along the interpolation axis, an odd multiple of the stride
    s = step[1]
    st = step[0]
    b = rec[p - st]
    if c + s < n:
        cc = rec[p + st]
        if c - 3 * s >= 0 and c + 3 * s < n:
            a = rec[p - 3 * st]
            d = rec[p + 3 * st]
            return (-a + 9.0 * b + 9.0 * cc - d) * 0.0625, CUBIC
        return (b + cc) * 0.5, LINEAR
    return b, COPY


@njit(inline="always")
def _top_stride(n0, n1, n2):
    m = max(n0, n1, n2)
    if m <= 1:
        return 0
    s = 1
    while 2 * s <= m - 1:
        s *= 2
    return s


@njit(cache=True)
def interp_quantize(data, eb, radius, codes, outliers, kind, level, rec):
    """Multilevel spline interpolation + quantization over a 3-D grid.

    ``codes`` and ``kind`` are flat arrays in row-major order. ``kind`` may
    be empty; otherwise it receives the stencil used at every point (CUBIC,
    LINEAR or COPY) and ``level`` the log2 of the point's stride. ``rec`` is
    flat scratch of the grid's size.
    """
    n0, n1, n2 = data.shape
    flat = data.ravel()
    twoeb = 2.0 * eb
    inv = 1.0 / twoeb
    track = kind.size > 0
    dims = (n0, n1, n2)
    strides = (n1 * n2, n2, 1)

    c0, r0 = _quantize(flat[0], 0.0, eb, twoeb, inv, radius)
    codes[0] = c0
    nout = 0
    if c0 == 0:
        outliers[0] = flat[0]
        nout = 1
    rec[0] = r0
    if track:
        kind[0] = COPY
        level[0] = 0

    s = _top_stride(n0, n1, n2)
    lv = 0
    while (1 << lv) < s:
        lv += 1
    while s >= 1:
        for d in range(3):
            start = [0, 0, 0]
            inc = [2 * s, 2 * s, 2 * s]
            for e in range(3):
                if e == d:
                    start[e] = s
                elif e < d:
                    inc[e] = s
            n = dims[d]
            step = (strides[d] * s, s)
            for i in range(start[0], n0, inc[0]):
                for j in range(start[1], n1, inc[1]):
                    for k in range(start[2], n2, inc[2]):
                        p = i * strides[0] + j * strides[1] + k
                        cd = i if d == 0 else (j if d == 1 else k)
                        pred, how = _interp_predict(rec, p, cd, n, step)
                        x = flat[p]
                        c, r = _quantize(x, pred, eb, twoeb, inv, radius)
                        codes[p] = c
                        if c == 0:
                            outliers[nout] = x
                            nout += 1
                        rec[p] = r
                        if track:
                            kind[p] = how
                            level[p] = lv
        s //= 2
        lv -= 1
    return nout


@njit(cache=True)
def interp_reconstruct(codes, outliers, eb, radius, shape, out):
    n0, n1, n2 = shape
    twoeb = 2.0 * eb
    dims = (n0, n1, n2)
    strides = (n1 * n2, n2, 1)
    used = 0
    if codes[0] == 0:
        if outliers.size < 1:
            return -1
        out[0] = outliers[0]
        used = 1
    else:
        out[0] = 0.0 + twoeb * np.float64(codes[0] - radius)

    s = _top_stride(n0, n1, n2)
    while s >= 1:
        for d in range(3):
            start = [0, 0, 0]
            inc = [2 * s, 2 * s, 2 * s]
            for e in range(3):
                if e == d:
                    start[e] = s
                elif e < d:
                    inc[e] = s
            n = dims[d]
            step = (strides[d] * s, s)
            for i in range(start[0], n0, inc[0]):
                for j in range(start[1], n1, inc[1]):
                    for k in range(start[2], n2, inc[2]):
                        p = i * strides[0] + j * strides[1] + k
                        c = codes[p]
                        if c == 0:
                            if used >= outliers.size:
                                return -1
                            out[p] = outliers[used]
                            used += 1
                        else:
                            cd = i if d == 0 else (j if d == 1 else k)
                            pred, how = _interp_predict(out, p, cd, n, step)
                            out[p] = pred + twoeb * np.float64(c - radius)
        s //= 2
    return used


# ------------------------------------------------------- sampled histograms

@njit(cache=True)
def lorenzo_block_hist(data, blocks, eb, radius, hist):
    """Accumulate code counts of block cores into ``hist``.

    ``blocks`` rows: ext origin (3), ext extent (3), core offset in ext (3),
    core extent (3). Returns the number of counted points.
    """
    counted = 0
    for b in range(blocks.shape[0]):
        o0, o1, o2 = blocks[b, 0], blocks[b, 1], blocks[b, 2]
        e0, e1, e2 = blocks[b, 3], blocks[b, 4], blocks[b, 5]
        f0, f1, f2 = blocks[b, 6], blocks[b, 7], blocks[b, 8]
        m0, m1, m2 = blocks[b, 9], blocks[b, 10], blocks[b, 11]
        sub = np.ascontiguousarray(data[o0:o0 + e0, o1:o1 + e1, o2:o2 + e2])
        codes = np.empty((e0, e1, e2), dtype=np.int32)
        outl = np.empty(e0 * e1 * e2)
        lorenzo_quantize(sub, eb, radius, codes, outl, np.zeros((e0 + 1, e1 + 1, e2 + 1)))
        for i in range(f0, f0 + m0):
            for j in range(f1, f1 + m1):
                for k in range(f2, f2 + m2):
                    hist[codes[i, j, k]] += 1
                    counted += 1
    return counted


@njit(cache=True)
def interp_block_samples(data, blocks, eb, radius, codes_out, stratum_out):
    """Quantize each block and emit (code, stratum) for every core point.

    stratum = 3 * level + stencil kind. Returns the number of points written.
    """
    counted = 0
    for b in range(blocks.shape[0]):
        o0, o1, o2 = blocks[b, 0], blocks[b, 1], blocks[b, 2]
        e0, e1, e2 = blocks[b, 3], blocks[b, 4], blocks[b, 5]
        f0, f1, f2 = blocks[b, 6], blocks[b, 7], blocks[b, 8]
        m0, m1, m2 = blocks[b, 9], blocks[b, 10], blocks[b, 11]
        sub = np.ascontiguousarray(data[o0:o0 + e0, o1:o1 + e1, o2:o2 + e2])
        n = e0 * e1 * e2
        codes = np.empty(n, dtype=np.int32)
        outl = np.empty(n)
        kind = np.zeros(n, dtype=np.uint8)
        level = np.zeros(n, dtype=np.uint8)
        interp_quantize(sub, eb, radius, codes, outl, kind, level, np.zeros(n))
        for i in range(f0, f0 + m0):
            for j in range(f1, f1 + m1):
                for k in range(f2, f2 + m2):
                    p = (i * e1 + j) * e2 + k
                    codes_out[counted] = codes[p]
                    stratum_out[counted] = 3 * level[p] + kind[p]
                    counted += 1
    return counted


# ---------------------------------------------------------------- Huffman

@njit(cache=True)
def inplace_code_lengths(a):
    """Optimal prefix-code lengths for weights sorted ascending.

    Overwrites ``a`` with the code length of each position (in-place
    minimum-redundancy calculation, no explicit tree). Ties between a leaf
    and an internal node favour the leaf.
    """
    n = a.size
    if n == 0:
        return
    if n == 1:
        a[0] = 1
        return
    a[0] += a[1]
    root = 0
    leaf = 2
    for nxt in range(1, n - 1):
        if leaf >= n or a[root] < a[leaf]:
            a[nxt] = a[root]
            a[root] = nxt
            root += 1
        else:
            a[nxt] = a[leaf]
            leaf += 1
        if leaf >= n or (root < nxt and a[root] < a[leaf]):
            a[nxt] += a[root]
            a[root] = nxt
            root += 1
        else:
            a[nxt] += a[leaf]
            leaf += 1
    a[n - 2] = 0
    for nxt in range(n - 3, -1, -1):
        a[nxt] = a[a[nxt]] + 1
    avbl = 1
    used = 0
    depth = 0
    root = n - 2
    nxt = n - 1
    while avbl > 0:
        while root >= 0 and a[root] == depth:
            used += 1
            root -= 1
        while avbl > used:
            a[nxt] = depth
            nxt -= 1
            avbl -= 1
        avbl = 2 * used
        depth += 1
        used = 0


@njit(cache=True)
def canonical_codes(symbols, lengths, values):
    """Assign canonical code values; ``symbols`` sorted by (length, symbol)."""
    code = 0
    prev = lengths[0]
    for i in range(symbols.size):
        ln = lengths[i]
        code <<= ln - prev
        values[i] = code
        code += 1
        prev = ln


@njit(cache=True)
def huffman_encode(codes, table_val, table_len, out, cases):
    """Write codes MSB-first; classify every write.

    case 3: current byte empty; case 1: code fits within the free bits of a
    partially filled byte; case 2: code exceeds them and spills into new
    bytes. Returns bytes written, or -1 for a code missing from the table.
    """
    pos = 0
    used = 0
    cur = 0
    n1 = 0
    n2 = 0
    n3 = 0
    for t in range(codes.size):
        c = codes[t]
        ln = table_len[c]
        if ln == 0:
            return -1
        v = table_val[c]
        if used == 0:
            n3 += 1
            while ln >= 8:
                ln -= 8
                out[pos] = (v >> ln) & 0xFF
                pos += 1
            cur = v & ((1 << ln) - 1)
            used = ln
        else:
            free = 8 - used
            if ln <= free:
                n1 += 1
                cur = (cur << ln) | v
                used += ln
                if used == 8:
                    out[pos] = cur
                    pos += 1
                    cur = 0
                    used = 0
            else:
                n2 += 1
                ln -= free
                out[pos] = ((cur << free) | (v >> ln)) & 0xFF
                pos += 1
                while ln >= 8:
                    ln -= 8
                    out[pos] = (v >> ln) & 0xFF
                    pos += 1
                cur = v & ((1 << ln) - 1)
                used = ln
    if used > 0:
        out[pos] = (cur << (8 - used)) & 0xFF
        pos += 1
    cases[0] = n1
    cases[1] = n2
    cases[2] = n3
    return pos


@njit(cache=True)
def huffman_decode(payload, n, first_code, first_index, count, sorted_syms, maxlen, out):
    """Canonical decode of ``n`` symbols; returns -1 on truncation or a bad code."""
    nbits = payload.size * 8
    bit = 0
    for t in range(n):
        code = 0
        ln = 0
        while True:
            if bit >= nbits:
                return -1
            code = (code << 1) | ((payload[bit >> 3] >> (7 - (bit & 7))) & 1)
            bit += 1
            ln += 1
            if ln > maxlen:
                return -1
            off = code - first_code[ln]
            if count[ln] > 0 and 0 <= off < count[ln]:
                out[t] = sorted_syms[first_index[ln] + off]
                break
    return n


# ---------------------------------------------------------------- lossless

@njit(cache=True)
def rle_encode(src, out):
    """(byte, LEB128 run length) pairs; returns bytes written."""
    n = src.size
    pos = 0
    i = 0
    while i < n:
        b = src[i]
        j = i + 1
        while j < n and src[j] == b:
            j += 1
        run = j - i
        out[pos] = b
        pos += 1
        while run >= 0x80:
            out[pos] = (run & 0x7F) | 0x80
            pos += 1
            run >>= 7
        out[pos] = run
        pos += 1
        i = j
    return pos


@njit(cache=True)
def rle_decode(src, out):
    n = src.size
    pos = 0
    i = 0
    while i < n:
        b = src[i]
        i += 1
        run = 0
        shift = 0
        while True:
            if i >= n:
                return -1
            v = src[i]
            i += 1
            run |= (v & 0x7F) << shift
            shift += 7
            if v < 0x80:
                break
            if shift > 56:
                return -1
        if pos + run > out.size:
            return -1
        out[pos:pos + run] = b
        pos += run
    return pos


HASH_BITS = 16
LZ_WINDOW = 65535
LZ_MIN_MATCH = 4


@njit(inline="always")
def _write_len(out, pos, ln):
    while ln >= 255:
        out[pos] = 255
        pos += 1
        ln -= 255
    out[pos] = ln
    return pos + 1


@njit(cache=True)
def lz_encode(src, out):
    """Greedy single-pass matcher, 64 KiB window, 4-byte minimum match.

    Token stream: token byte (literal length nibble, match length - 4
    nibble, 15 means continued in 255-run extension bytes), literals,
    little-endian u16 offset. The last sequence carries literals only.
    Returns bytes written, or -1 if ``out`` would overflow.
    """
    n = src.size
    cap = out.size
    table = np.full(1 << HASH_BITS, -1, dtype=np.int64)
    pos = 0
    anchor = 0
    i = 0
    limit = n - LZ_MIN_MATCH
    while i <= limit:
        seq = (np.int64(src[i]) | (np.int64(src[i + 1]) << 8)
               | (np.int64(src[i + 2]) << 16) | (np.int64(src[i + 3]) << 24))
        h = ((seq * 2654435761) & 0xFFFFFFFF) >> (32 - HASH_BITS)
        cand = table[h]
        table[h] = i
        if (cand >= 0 and i - cand <= LZ_WINDOW and src[cand] == src[i]
                and src[cand + 1] == src[i + 1] and src[cand + 2] == src[i + 2]
                and src[cand + 3] == src[i + 3]):
            m = LZ_MIN_MATCH
            while i + m < n and src[cand + m] == src[i + m]:
                m += 1
            lit = i - anchor
            if pos + 1 + lit + lit // 255 + 2 + m // 255 + 2 > cap:
                return -1
            tpos = pos
            pos += 1
            tok_l = 15 if lit >= 15 else lit
            tok_m = 15 if m - LZ_MIN_MATCH >= 15 else m - LZ_MIN_MATCH
            out[tpos] = (tok_l << 4) | tok_m
            if lit >= 15:
                pos = _write_len(out, pos, lit - 15)
            out[pos:pos + lit] = src[anchor:i]
            pos += lit
            off = i - cand
            out[pos] = off & 0xFF
            out[pos + 1] = off >> 8
            pos += 2
            if m - LZ_MIN_MATCH >= 15:
                pos = _write_len(out, pos, m - LZ_MIN_MATCH - 15)
            i += m
            anchor = i
            if i - 2 >= 0 and i - 2 <= limit:
                j = i - 2
                s2 = (np.int64(src[j]) | (np.int64(src[j + 1]) << 8)
                      | (np.int64(src[j + 2]) << 16) | (np.int64(src[j + 3]) << 24))
                table[((s2 * 2654435761) & 0xFFFFFFFF) >> (32 - HASH_BITS)] = j
        else:
            i += 1
    lit = n - anchor
    if pos + 1 + lit + lit // 255 + 1 > cap:
        return -1
    out[pos] = (15 if lit >= 15 else lit) << 4
    pos += 1
    if lit >= 15:
        pos = _write_len(out, pos, lit - 15)
    out[pos:pos + lit] = src[anchor:n]
    pos += lit
    return pos


@njit(inline="always")
def _read_len(src, i, ln):
    n = src.size
    while True:
        if i >= n:
            return -1, i
        v = src[i]
        i += 1
        ln += v
        if v != 255:
            return ln, i


@njit(cache=True)
def lz_decode(src, out):
    n = src.size
    cap = out.size
    i = 0
    pos = 0
    while i < n:
        tok = src[i]
        i += 1
        lit = np.int64(tok >> 4)
        if lit == 15:
            lit, i = _read_len(src, i, lit)
            if lit < 0:
                return -1
        if i + lit > n or pos + lit > cap:
            return -1
        out[pos:pos + lit] = src[i:i + lit]
        pos += lit
        i += lit
        if i >= n:
            break
        if i + 2 > n:
            return -1
        off = np.int64(src[i]) | (np.int64(src[i + 1]) << 8)
        i += 2
        m = np.int64(tok & 15)
        if m == 15:
            m, i = _read_len(src, i, m)
            if m < 0:
                return -1
        m += LZ_MIN_MATCH
        if off == 0 or off > pos or pos + m > cap:
            return -1
        for t in range(m):
            out[pos + t] = out[pos - off + t]
        pos += m
    return pos
