"""Pure-Python Gotoh affine-gap global alignment (fallback kernel).

Same contract, recurrences and tie-breaking as the compiled kernel in
``_gotoh.pyx``; used when the extension is unavailable or disabled via
``RESCAP_NO_NATIVE``.
"""

import numpy as np

NEG_INF = float("-inf")

DIAG, UP, LEFT = 0, 1, 2  # traceback move codes


def align_pair(a_codes, b_codes, sub, gap_open, gap_extend):
    """Align two encoded sequences; return ``(score, ops)``.

    ``ops`` is a uint8 array of moves from the start of the alignment:
    0 = residue/residue column, 1 = gap in b, 2 = gap in a.  A gap of
    length L costs ``open + (L - 1) * extend``.  Score ties prefer the
    residue pair, then the gap in b, then the gap in a.
    """
    a = [int(x) for x in a_codes]
    b = [int(x) for x in b_codes]
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("empty sequence")
    S = np.asarray(sub, dtype=np.float64).tolist()
    go, ge = float(gap_open), float(gap_extend)

    width = m + 1
    # per cell, bits 0-1 / 2-3 / 4-5 hold the predecessor state (0=M, 1=X,
    # 2=Y) of the M / X / Y matrix respectively
    ptr = [bytearray(width) for _ in range(n + 1)]

    M_prev = [NEG_INF] * width
    X_prev = [NEG_INF] * width
    Y_prev = [NEG_INF] * width
    M_prev[0] = 0.0
    row0 = ptr[0]
    for j in range(1, width):
        Y_prev[j] = -(go + (j - 1) * ge)
        row0[j] = (2 if j > 1 else 0) << 4

    M_cur = [NEG_INF] * width
    X_cur = [NEG_INF] * width
    Y_cur = [NEG_INF] * width

    for i in range(1, n + 1):
        srow = S[a[i - 1]]
        prow = ptr[i]
        M_cur[0] = NEG_INF
        Y_cur[0] = NEG_INF
        X_cur[0] = -(go + (i - 1) * ge)
        prow[0] = (1 if i > 1 else 0) << 2
        for j in range(1, width):
            # M: a[i-1] aligned to b[j-1], diagonal predecessor
            m_d = M_prev[j - 1]
            x_d = X_prev[j - 1]
            y_d = Y_prev[j - 1]
            if m_d >= x_d and m_d >= y_d:
                best, pm = m_d, 0
            elif x_d >= y_d:
                best, pm = x_d, 1
            else:
                best, pm = y_d, 2
            M_cur[j] = best + srow[b[j - 1]]
            # X: gap in b (consumes a), predecessor above
            m_u = M_prev[j] - go
            x_u = X_prev[j] - ge
            y_u = Y_prev[j] - go
            if m_u >= x_u and m_u >= y_u:
                X_cur[j], px = m_u, 0
            elif x_u >= y_u:
                X_cur[j], px = x_u, 1
            else:
                X_cur[j], px = y_u, 2
            # Y: gap in a (consumes b), predecessor to the left
            m_l = M_cur[j - 1] - go
            x_l = X_cur[j - 1] - go
            y_l = Y_cur[j - 1] - ge
            if m_l >= x_l and m_l >= y_l:
                Y_cur[j], py = m_l, 0
            elif x_l >= y_l:
                Y_cur[j], py = x_l, 1
            else:
                Y_cur[j], py = y_l, 2
            prow[j] = pm | (px << 2) | (py << 4)
        M_prev, M_cur = M_cur, M_prev
        X_prev, X_cur = X_cur, X_prev
        Y_prev, Y_cur = Y_cur, Y_prev

    m_f, x_f, y_f = M_prev[m], X_prev[m], Y_prev[m]
    if m_f >= x_f and m_f >= y_f:
        score, state = m_f, 0
    elif x_f >= y_f:
        score, state = x_f, 1
    else:
        score, state = y_f, 2

    ops = bytearray()
    i, j = n, m
    while i > 0 or j > 0:
        p = ptr[i][j]
        if state == 0:
            ops.append(DIAG)
            state = p & 3
            i -= 1
            j -= 1
        elif state == 1:
            ops.append(UP)
            state = (p >> 2) & 3
            i -= 1
        else:
            ops.append(LEFT)
            state = (p >> 4) & 3
            j -= 1
    ops.reverse()
    return score, np.frombuffer(bytes(ops), dtype=np.uint8)
