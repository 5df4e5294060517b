import numpy as np

# Double-well: drift 4(x-x^3), diffusion_sq max(4-1.25x^2, 0)
def drift(x): return 4.0 * (x - x**3)
def gsq(x): return np.maximum(4.0 - 1.25 * x * x, 0.0)

def simulate(n_steps, dt, x0, seed):
    rng = np.random.default_rng(seed)
    xs = np.empty(n_steps)
    xs[0] = x0
    x = x0
    for i in range(n_steps - 1):
        eps = rng.standard_normal()
        x = x + dt * drift(x) + np.sqrt(dt * gsq(x)) * eps
        xs[i + 1] = x
    return xs

def km_estimate(states, dt, queries, floor=1e-6):
    x = states[:-1]
    dx = np.diff(states)
    m, s = x.mean(), x.std()
    h = max(1.06 * len(x) ** (-0.2), 0.05)
    z = (x - m) / s
    zq = (np.asarray(queries) - m) / s
    # weights: (Q, M)
    d2 = (zq[:, None] - z[None, :]) ** 2
    u = np.exp(-d2 / (2 * h * h))
    w = u / u.sum(axis=1, keepdims=True)
    f = (w @ dx) / dt
    g = (w @ (dx[None, :] - dt * f[:, None]) ** 2 / dt * np.ones(1)).diagonal() if False else \
        np.einsum('qm,qm->q', w, (dx[None, :] - dt * f[:, None]) ** 2) / dt
    return f, np.maximum(g, floor), h

# ---- criterion 2: histogram modes on 1e5 steps ----
xs = simulate(100_000, 0.002, 0.0, 12345)
print("sup|x| =", np.abs(xs).max())
bins = np.arange(-2.05, 2.06, 0.1)
counts, edges = np.histogram(xs, bins=bins)
centers = 0.5 * (edges[:-1] + edges[1:])
modes = []
for i in range(1, len(counts) - 1):
    if counts[i] > counts[i-1] and counts[i] > counts[i+1] and counts[i] > 0.01 * counts.max():
        modes.append(centers[i])
print("modes:", modes)

# ---- criterion 3: estimator fidelity on 2e5 truth ----
for seed in [1, 2, 7]:
    xs2 = simulate(200_000, 0.002, 0.0, seed)
    grid = np.linspace(-1.2, 1.2, 33)
    f, g, h = km_estimate(xs2, 0.002, grid)
    rmse_f = np.sqrt(np.mean((f - drift(grid)) ** 2))
    rmse_g = np.sqrt(np.mean((g - gsq(grid)) ** 2))
    # zero crossings of estimated drift on the grid (sign changes)
    sgn = np.sign(f)
    cross = []
    for i in range(len(grid) - 1):
        if sgn[i] != 0 and sgn[i+1] != 0 and sgn[i] != sgn[i+1]:
            # linear interp
            t = f[i] / (f[i] - f[i+1])
            cross.append(grid[i] + t * (grid[i+1] - grid[i]))
    gmax_at = grid[np.argmax(g)]
    print(f"seed={seed} h={h:.4f} rmse_f={rmse_f:.4f} rmse_g={rmse_g:.4f} crossings={np.round(cross,3)} gmax_at={gmax_at:.3f}")

# ---- 5000-point structural check (what eval sees at best) ----
xs3 = simulate(5000, 0.002, 0.0, 3)
grid = np.linspace(-1.2, 1.2, 33)
f, g, h = km_estimate(xs3, 0.002, grid)
sgn = np.sign(f)
cross = [grid[i] + f[i]/(f[i]-f[i+1])*(grid[i+1]-grid[i]) for i in range(32) if sgn[i]*sgn[i+1] < 0]
print("5000-pt: h=%.4f crossings=%s rmse_f=%.3f" % (h, np.round(cross,3), np.sqrt(np.mean((f-drift(grid))**2))))
