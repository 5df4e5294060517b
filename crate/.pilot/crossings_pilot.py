import numpy as np

def drift(x): return 4.0 * (x - x**3)
def gsq(x): return np.maximum(4.0 - 1.25 * x * x, 0.0)

def simulate(n_steps, dt, x0, seed):
    rng = np.random.default_rng(seed)
    xs = np.empty(n_steps)
    x = x0
    xs[0] = x
    for i in range(n_steps - 1):
        x = x + dt * drift(x) + np.sqrt(dt * gsq(x)) * rng.standard_normal()
        xs[i + 1] = x
    return xs

def km_estimate(pairs_x, pairs_dx, dt, queries, floor=1e-6):
    m, s = pairs_x.mean(), pairs_x.std()
    M = len(pairs_x)
    h = max(1.06 * M ** (-0.2), 0.05)
    z = (pairs_x - m) / s
    zq = (np.asarray(queries) - m) / s
    d2 = (zq[:, None] - z[None, :]) ** 2
    u = np.exp(-d2 / (2 * h * h))
    w = u / u.sum(axis=1, keepdims=True)
    f = (w @ pairs_dx) / dt
    g = np.einsum('qm,qm->q', w, (pairs_dx[None, :] - dt * f[:, None]) ** 2) / dt
    return f, np.maximum(g, floor), h

def crossings(grid, f):
    out = []
    for i in range(len(grid) - 1):
        if f[i] == 0: continue
        if f[i] * f[i+1] < 0:
            t = f[i] / (f[i] - f[i+1])
            out.append(grid[i] + t * (grid[i+1] - grid[i]))
    return np.array(out)

def ok3(cr):
    if len(cr) != 3: return False
    targets = [-1.0, 0.0, 1.0]
    return all(abs(c - t) <= 0.3 for c, t in zip(sorted(cr), targets))

grid = np.linspace(-1.2, 1.2, 33)
dt = 0.002
for M_cap in [4999, 2048, 1024, 512]:
    results = []
    for seed in range(10):
        xs = simulate(5000, dt, 0.0, 100 + seed)
        px, pdx = xs[:-1], np.diff(xs)
        if len(px) > M_cap:
            rng = np.random.default_rng(seed * 7 + 1)
            idx = np.sort(rng.choice(len(px), M_cap, replace=False))
            px, pdx = px[idx], pdx[idx]
        f, g, h = km_estimate(px, pdx, dt, grid)
        cr = crossings(grid, f)
        results.append((len(cr), ok3(cr), np.round(cr, 2)))
    npass = sum(r[1] for r in results)
    print(f"M={M_cap} h={h:.3f} pass={npass}/10 counts={[r[0] for r in results]}")
    for r in results:
        if not r[1]: print("   fail:", r[2])
