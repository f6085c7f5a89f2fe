"""Loop-level oracles for the distillation terms (plain python floats)."""
import math


def softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def attention(F, t):
    """F[c][i][j] -> (spatial[i][j], channel[c])."""
    C, H, W = len(F), len(F[0]), len(F[0][0])
    sp = [sum(abs(F[c][i][j]) for c in range(C)) / C / t for i in range(H) for j in range(W)]
    sp = [H * W * v for v in softmax(sp)]
    ch = [sum(abs(F[c][i][j]) for i in range(H) for j in range(W)) / (H * W) / t for c in range(C)]
    ch = [C * v for v in softmax(ch)]
    return [sp[i * W:(i + 1) * W] for i in range(H)], ch


def focal(FT, FS, M, S, Mh, Sh, sigma, beta, gamma, t):
    C, H, W = len(FT), len(FT[0]), len(FT[0][0])
    sT, cT = attention(FT, t)
    sS, cS = attention(FS, t)
    fg = bg = 0.0
    for k in range(C):
        for i in range(H):
            for j in range(W):
                d = (FT[k][i][j] - FS[k][i][j]) ** 2
                fg += M[i][j] * S[i][j] * sT[i][j] * cT[k] * d
                bg += Mh[i][j] * Sh[i][j] * sT[i][j] * cT[k] * d
    l1 = sum(abs(sT[i][j] - sS[i][j]) for i in range(H) for j in range(W)) + sum(abs(a - b) for a, b in zip(cT, cS))
    return sigma * fg + beta * bg + gamma * l1


def gc_block(F, wk, bk, w1, b1, ln_g, ln_b, w2, b2, eps=1e-5):
    """F[c][p] over flattened pixels; w1 is hidden x C, w2 is C x hidden."""
    C, P = len(F), len(F[0])
    logits = [sum(wk[c] * F[c][p] for c in range(C)) + bk for p in range(P)]
    a = softmax(logits)
    ctx = [sum(a[p] * F[c][p] for p in range(P)) for c in range(C)]
    h = [sum(w1[r][c] * ctx[c] for c in range(C)) + b1[r] for r in range(len(w1))]
    mu = sum(h) / len(h)
    var = sum((x - mu) ** 2 for x in h) / len(h)
    h = [(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(h, ln_g, ln_b)]
    h = [max(0.0, x) for x in h]
    out = [sum(w2[c][r] * h[r] for r in range(len(h))) + b2[c] for c in range(C)]
    return [[F[c][p] + out[c] for p in range(P)] for c in range(C)]


if __name__ == "__main__":
    # one image, C=1, H=W=2, foreground cell (0, 0)
    FT = [[[1.0, 0.5], [-0.5, 0.25]]]
    FS = [[[0.0, 0.5], [0.5, 0.0]]]
    M = [[1, 0], [0, 0]]
    S = [[1.0, 0], [0, 0]]
    Mh = [[0, 1], [1, 1]]
    Sh = [[0, 1 / 3], [1 / 3, 1 / 3]]
    print("focal hand", repr(focal(FT, FS, M, S, Mh, Sh, 1.6e-3, 8e-4, 8e-4, 0.8)))
    # C=2, H=1, W=2 GcBlock pair with fixed tiny weights
    FT2 = [[1.0, -1.0], [0.5, 2.0]]
    FS2 = [[0.5, -0.5], [0.0, 1.0]]
    kw = dict(wk=[0.3, -0.2], bk=0.1, w1=[[0.5, 0.25]], b1=[0.0], ln_g=[1.0], ln_b=[0.2], w2=[[0.7], [-0.4]], b2=[0.05, 0.1])
    gt = gc_block(FT2, **kw)
    gs = gc_block(FS2, **kw)
    val = 8e-6 * sum((a - b) ** 2 for ra, rb in zip(gt, gs) for a, b in zip(ra, rb))
    print("global hand", repr(val))
