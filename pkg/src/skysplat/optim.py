"""Optimizers: Adam with named parameter groups, and a limited-memory BFGS
with strong-Wolfe line search used for the global scale alignment.
"""

from __future__ import annotations

import numpy as np


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) over named arrays.

    Parameters are updated in place; per-key state is created lazily so new
    keys (densified Gaussians, newly sampled frames) just work. Keys listed
    in ``unit_quaternion_keys`` are renormalized row-wise after each step.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, dict] = {}
        self.unit_quaternion_keys: set[str] = set()

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             rates: dict[str, float]):
        for key, p in params.items():
            g = grads.get(key)
            lr = rates.get(key, 0.0)
            if g is None or lr == 0.0:
                continue
            st = self.state.get(key)
            if st is None or st["m"].shape != p.shape:
                st = {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0}
                self.state[key] = st
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * g * g
            m_hat = st["m"] / (1 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1 - self.beta2 ** st["t"])
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if key in self.unit_quaternion_keys:
                p /= np.linalg.norm(p, axis=-1, keepdims=True)

    def mask_state(self, key: str, keep: np.ndarray):
        """Shrink state after pruning Gaussians."""
        st = self.state.get(key)
        if st is not None:
            st["m"] = st["m"][keep]
            st["v"] = st["v"][keep]

    def extend_state(self, key: str, n_new: int):
        """Zero-state rows for cloned/split Gaussians."""
        st = self.state.get(key)
        if st is not None:
            pad = [(0, n_new)] + [(0, 0)] * (st["m"].ndim - 1)
            st["m"] = np.pad(st["m"], pad)
            st["v"] = np.pad(st["v"], pad)


class LBFGS:
    """Limited-memory BFGS (two-loop recursion) with strong-Wolfe search.

    ``lr`` scales the accepted step, matching the update rule
    x_{n+1} = x_n - lr * H_n * grad(x_n) with H_n the inverse-Hessian
    approximation from the (s, y) history.
    """

    def __init__(self, memory: int = 10, lr: float = 0.1,
                 c1: float = 1e-4, c2: float = 0.9):
        self.memory = memory
        self.lr = lr
        self.c1 = c1
        self.c2 = c2

    def minimize(self, f_grad, x0, steps: int = 30, callback=None):
        x = np.atleast_1d(np.asarray(x0, dtype=np.float64)).copy()
        fx, gx = f_grad(x)
        s_hist, y_hist, rho_hist = [], [], []
        trace = [float(fx)]
        best_x, best_f = x.copy(), fx
        for _ in range(steps):
            d = -self._two_loop(gx, s_hist, y_hist, rho_hist)
            if np.dot(d, gx) >= 0:  # safeguard: reset to steepest descent
                d = -gx
                s_hist, y_hist, rho_hist = [], [], []
            t, f_new, g_new, x_new = self._line_search(f_grad, x, fx, gx, d)
            if t == 0.0:
                break
            s = x_new - x
            y = g_new - gx
            sy = float(np.dot(s, y))
            if sy > 1e-12:
                s_hist.append(s)
                y_hist.append(y)
                rho_hist.append(1.0 / sy)
                if len(s_hist) > self.memory:
                    s_hist.pop(0)
                    y_hist.pop(0)
                    rho_hist.pop(0)
            x, fx, gx = x_new, f_new, g_new
            if fx < best_f:
                best_x, best_f = x.copy(), fx
            trace.append(float(fx))
            if callback is not None:
                callback(x, fx)
            if np.linalg.norm(gx) < 1e-12:
                break
        return best_x, best_f, trace

    def _two_loop(self, g, s_hist, y_hist, rho_hist):
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        return q

    def _line_search(self, f_grad, x, fx, gx, d, max_iter=25):
        """Strong Wolfe via bracketing + bisection zoom; the initial trial
        step is scaled by ``lr``."""
        d_phi0 = float(np.dot(gx, d))
        if d_phi0 >= 0:
            return 0.0, fx, gx, x
        phi0 = fx
        c1, c2 = self.c1, self.c2

        def eval_at(t):
            xn = x + (self.lr * t) * d
            v, g = f_grad(xn)
            return v, g, xn, float(np.dot(g, d)) * self.lr

        # Derivative w.r.t. t includes the lr factor.
        d_phi0_t = d_phi0 * self.lr
        lo_t, lo_val, lo_state = 0.0, phi0, (fx, gx, x)
        t_prev, val_prev = 0.0, phi0
        t = 1.0
        best_t, best = 0.0, (fx, gx, x)
        for i in range(max_iter):
            val, g, xn, d_phi = eval_at(t)
            if val > phi0 + c1 * t * d_phi0_t or (i > 0 and val >= val_prev):
                return self._bisect(eval_at, phi0, d_phi0_t, t_prev, t, best_t, best)
            if val < best[0]:
                best_t, best = t, (val, g, xn)
            if abs(d_phi) <= -c2 * d_phi0_t:
                return self.lr * t, val, g, xn
            if d_phi >= 0:
                return self._bisect(eval_at, phi0, d_phi0_t, t, t_prev, best_t, best)
            t_prev, val_prev = t, val
            t *= 2.0
        val, g, xn = best
        return self.lr * best_t, val, g, xn

    def _bisect(self, eval_at, phi0, d_phi0_t, lo, hi, best_t, best,
                c1=1e-4, c2=0.9, max_iter=25):
        for _ in range(max_iter):
            t = 0.5 * (lo + hi)
            val, g, xn, d_phi = eval_at(t)
            if val < best[0]:
                best_t, best = t, (val, g, xn)
            if val > phi0 + c1 * t * d_phi0_t:
                hi = t
                continue
            if abs(d_phi) <= -c2 * d_phi0_t:
                return self.lr * t, val, g, xn
            if d_phi * (hi - lo) >= 0:
                hi = lo
            lo = t
            if abs(hi - lo) < 1e-14:
                break
        val, g, xn = best
        return self.lr * best_t, val, g, xn
