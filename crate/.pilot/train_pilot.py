import numpy as np, time

def drift(x): return 4.0 * (x - x**3)
def gsq(x): return np.maximum(4.0 - 1.25 * x * x, 0.0)

def simulate(n_steps, dt, x0, seed):
    rng = np.random.default_rng(seed)
    out = np.empty(n_steps); x = x0; out[0] = x
    for i in range(n_steps - 1):
        x = x + dt*drift(x) + np.sqrt(dt*gsq(x))*rng.standard_normal()
        out[i+1] = x
    return out

def render(xs, H=51, W=51, sigma=2.5, scale=10.0, cr=25.0, cc=25.0, amp=1.0):
    rows = np.arange(H)[:, None]; cols = np.arange(W)[None, :]
    frames = np.empty((len(xs), H*W))
    rowterm = (rows - cr)**2
    for i, x in enumerate(xs):
        c0 = cc + scale*x
        fr = amp*np.exp(-((cols - c0)**2 + rowterm) / (2*sigma*sigma))
        frames[i] = fr.ravel()
    return frames

# ---------- MLP ----------
def glorot(shapes, seed):
    rng = np.random.default_rng(seed)
    params = []
    for (out_d, in_d) in shapes:
        r = np.sqrt(6.0/(in_d+out_d))
        params.append([rng.uniform(-r, r, size=(out_d, in_d)), np.zeros(out_d)])
    return params

def fwd(params, A):
    acts = [A]
    L = len(params)
    for l, (W, b) in enumerate(params):
        Z = A @ W.T + b
        A = Z if l == L-1 else np.tanh(Z)
        acts.append(A)
    return A, acts

def bwd(params, acts, dOut):
    # dOut = dL/d(output) with linear last layer
    grads = [None]*len(params)
    dZ = dOut
    for l in range(len(params)-1, -1, -1):
        W, b = params[l]
        Aprev = acts[l]
        grads[l] = [dZ.T @ Aprev, dZ.sum(axis=0)]
        if l > 0:
            dA = dZ @ W
            dZ = dA * (1.0 - acts[l]**2)  # acts[l] = tanh(Z_l) for hidden
    return grads, (dZ @ params[0][0] if False else None)

def bwd_with_input_grad(params, acts, dOut):
    grads = [None]*len(params)
    dZ = dOut
    for l in range(len(params)-1, -1, -1):
        W, b = params[l]
        Aprev = acts[l]
        grads[l] = [dZ.T @ Aprev, dZ.sum(axis=0)]
        dA = dZ @ W
        if l > 0:
            dZ = dA * (1.0 - acts[l]**2)
        else:
            dIn = dA
    return grads, dIn

# ---------- kernel estimator (d=1) ----------
FLOOR = 1e-6
def build_ctx(px, pdx, dt):
    m, s = px.mean(), px.std()
    h = max(1.06 * len(px)**(-0.2), 0.05)
    return dict(px=px, pdx=pdx, m=m, s=s, h=h, dt=dt)

def km_est(ctx, q, with_grad=False):
    m, s, h, dt = ctx['m'], ctx['s'], ctx['h'], ctx['dt']
    z = (ctx['px'] - m)/s
    zq = (q - m)/s
    diff = zq[:, None] - z[None, :]
    u = np.exp(-diff**2/(2*h*h))
    S = u.sum(axis=1, keepdims=True)
    w = u/S
    f = (w @ ctx['pdx'])/dt
    resid = ctx['pdx'][None, :] - dt*f[:, None]
    g_raw = np.einsum('qm,qm->q', w, resid**2)/dt
    g = np.maximum(g_raw, FLOOR)
    if not with_grad:
        return f, g, None, None
    # dw/dzq = w * (b_i - bbar), b_i = -diff/h^2
    b = -diff/(h*h)
    bbar = np.einsum('qm,qm->q', w, b)
    dw = w * (b - bbar[:, None])
    df = (dw @ ctx['pdx'])/dt / s          # d/dx = d/dzq * 1/s
    dg = np.einsum('qm,qm->q', dw, resid**2)/dt / s
    dg = np.where(g_raw > FLOOR, dg, 0.0)
    return f, g, df, dg

# ---------- dynamics loss ----------
def dynamics_loss(enc, dec, Yi, Yj, ctx, eps, dt, through):
    X, enc_acts = fwd(enc, Yi)
    x = X[:, 0]
    f, g, dfdx, dgdx = km_est(ctx, x, with_grad=through)
    sq = np.sqrt(dt*g)
    xp = x + dt*f + eps*sq
    Yhat, dec_acts = fwd(dec, xp[:, None])
    R = Yhat - Yj
    loss = np.sum(R*R)
    dec_grads, dXp = bwd_with_input_grad(dec, dec_acts, 2*R)
    dxp = dXp[:, 0]
    if through:
        dx = dxp * (1.0 + dt*dfdx + eps*np.sqrt(dt)*0.5/np.sqrt(g)*dgdx)
    else:
        dx = dxp
    enc_grads, _ = bwd_with_input_grad(enc, enc_acts, dx[:, None])
    return loss, enc_grads, dec_grads

# ---------- FD check on tiny instance ----------
def flat(params):
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in params])
def unflat(vec, shapes):
    params, o = [], 0
    for (od, idim) in shapes:
        W = vec[o:o+od*idim].reshape(od, idim); o += od*idim
        b = vec[o:o+od]; o += od
        params.append([W, b])
    return params

def fd_check():
    rng = np.random.default_rng(0)
    D, h1, h2, d, N = 16, 8, 4, 1, 32
    enc_shapes = [(h1, D), (h2, h1), (d, h2)]
    dec_shapes = [(h2, d), (h1, h2), (D, h1)]
    enc = glorot(enc_shapes, 1); dec = glorot(dec_shapes, 2)
    Y = rng.standard_normal((N, D))*0.5
    Yi, Yj = Y[:-1], Y[1:]
    eps = rng.standard_normal(N-1)
    dt = 0.002
    # fixed context from base encoding
    X0, _ = fwd(enc, Y)
    ctx = build_ctx(X0[:-1, 0], np.diff(X0[:, 0]), dt)
    for through in [True, False]:
        loss, eg, dg_ = dynamics_loss(enc, dec, Yi, Yj, ctx, eps, dt, through)
        gvec = np.concatenate([flat(eg), flat(dg_)])
        theta = np.concatenate([flat(enc), flat(dec)])
        ne = len(flat(enc))
        if through:
            def lossfn(t):
                e = unflat(t[:ne], enc_shapes); dd = unflat(t[ne:], dec_shapes)
                return dynamics_loss(e, dd, Yi, Yj, ctx, eps, dt, True)[0]
        else:
            # detached oracle: fields frozen at base query values
            xb, _ = fwd(enc, Yi)
            fb, gb, _, _ = km_est(ctx, xb[:, 0])
            def lossfn(t):
                e = unflat(t[:ne], enc_shapes); dd = unflat(t[ne:], dec_shapes)
                X, _ = fwd(e, Yi); x = X[:, 0]
                xp = x + dt*fb + eps*np.sqrt(dt*gb)
                Yhat, _ = fwd(dd, xp[:, None])
                return np.sum((Yhat - Yj)**2)
        idxs = rng.choice(len(theta), 120, replace=False)
        for hstep in [1e-6, 3e-6, 1e-5, 3e-5]:
            worst = 0.0
            for i in idxs:
                tp = theta.copy(); tp[i] += hstep
                tm = theta.copy(); tm[i] -= hstep
                fdg = (lossfn(tp) - lossfn(tm)) / (2*hstep)
                if abs(gvec[i]) > 1e-8:
                    worst = max(worst, abs(fdg - gvec[i]) / max(abs(gvec[i]), abs(fdg)))
            print(f"FD check through={through} h={hstep:.0e}: worst rel err {worst:.2e}")

fd_check()

# ---------- full training pilot ----------
def adam_init(shapes): return [ [np.zeros((od, idim)), np.zeros((od, idim)), np.zeros(od), np.zeros(od)] for od, idim in shapes ]

def train(frames, dt, seed, steps=300, B=256, M=1024, lr=1e-3, through=True):
    D = frames.shape[1]
    enc_shapes = [(128, D), (64, 128), (1, 64)]
    dec_shapes = [(64, 1), (128, 64), (D, 128)]
    enc = glorot(enc_shapes, seed*2+1); dec = glorot(dec_shapes, seed*2+2)
    mstate = adam_init(enc_shapes + dec_shapes)
    b1, b2, epsad = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(seed + 777)
    N = frames.shape[0]
    losses = []
    t = 0
    for step in range(steps):
        # ctx refresh: subsample M pair indices, encode both frames
        pidx = rng.choice(N-1, M, replace=False)
        Xa, _ = fwd(enc, frames[pidx]);  Xb, _ = fwd(enc, frames[pidx+1])
        px = Xa[:, 0]; pdx = Xb[:, 0] - Xa[:, 0]
        if px.std() < 1e-12: raise RuntimeError("collapsed")
        ctx = build_ctx(px, pdx, dt)
        bidx = rng.integers(0, N-1, B)
        eps = rng.standard_normal(B)
        loss, eg, dgr = dynamics_loss(enc, dec, frames[bidx], frames[bidx+1], ctx, eps, dt, through)
        losses.append(loss)
        t += 1
        allp = enc + dec; allg = eg + dgr
        for (p, gr, st) in zip(allp, allg, mstate):
            for k in range(2):
                st[2*k+0][:] = b1*st[2*k+0] + (1-b1)*gr[k]
                st[2*k+1][:] = b2*st[2*k+1] + (1-b2)*gr[k]**2
                mhat = st[2*k+0]/(1-b1**t); vhat = st[2*k+1]/(1-b2**t)
                p[k] -= lr*mhat/(np.sqrt(vhat)+epsad)
    return enc, dec, losses

def evaluate(enc, dec, frames, truth, dt):
    X, _ = fwd(enc, frames); learned = X[:, 0]
    a = np.cov(learned, truth)[0, 1]/learned.var()
    b = truth.mean() - a*learned.mean()
    aligned = a*learned + b
    corr = np.corrcoef(aligned, truth)[0, 1]
    grid = np.linspace(-1.2, 1.2, 33)
    ctx = build_ctx(learned[:-1], np.diff(learned), dt)
    f, g, _, _ = km_est(ctx, (grid - b)/a)
    fu = a*f; gu = a*a*g
    cr = []
    for i in range(32):
        if fu[i]*fu[i+1] < 0:
            tt = fu[i]/(fu[i]-fu[i+1]); cr.append(grid[i]+tt*(grid[i+1]-grid[i]))
    Yhat, _ = fwd(dec, X)
    mse = np.mean((Yhat - frames)**2)
    rmse_f = np.sqrt(np.mean((fu - drift(grid))**2))
    rmse_g = np.sqrt(np.mean((gu - gsq(grid))**2))
    return corr, mse, cr, rmse_f, rmse_g

dt = 0.002
truth = simulate(5000, dt, 0.0, 0)   # good specimen from the scan
frames = render(truth)
print("dataset ready", frames.shape)

for through in [True, False]:
    t0 = time.time()
    enc, dec, losses = train(frames, dt, seed=0, steps=300, through=through)
    corr, mse, cr, rf, rg = evaluate(enc, dec, frames, truth, dt)
    print(f"through={through}: {time.time()-t0:.1f}s loss {losses[0]:.1f}->{losses[-1]:.1f} "
          f"ratio={losses[-1]/losses[0]:.3f} corr={corr:.4f} mse={mse:.2e} crossings={np.round(cr,3)}")
