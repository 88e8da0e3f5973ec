"""Regenerate crates/core/data/wscc9.toml.

Solves the WSCC 9-bus power flow, converts loads to constant impedances,
adds generator transient reactances and Kron-reduces onto the three internal
generator buses. Each outage scenario removes one network branch (a line or a
load shunt) and re-reduces with the same internal voltages and mechanical power.
"""
import numpy as np

LINES = [  # from, to, R, X, B_total
    (1, 4, 0.0, 0.0576, 0.0), (2, 7, 0.0, 0.0625, 0.0), (3, 9, 0.0, 0.0586, 0.0),
    (4, 5, 0.010, 0.085, 0.176), (4, 6, 0.017, 0.092, 0.158),
    (5, 7, 0.032, 0.161, 0.306), (6, 9, 0.039, 0.170, 0.358),
    (7, 8, 0.0085, 0.072, 0.149), (8, 9, 0.0119, 0.1008, 0.209),
]
LOADS = {5: (1.25, 0.5), 6: (0.9, 0.3), 8: (1.0, 0.35)}
H = np.array([23.64, 6.4, 3.01])
XDP = np.array([0.0608, 0.1198, 0.1813])
F_HZ = 60.0
DAMPING_PER_INERTIA = 2.0  # D_i = 2 * M_i, i.e. a 1 s amplitude decay constant


def ybus(lines):
    y = np.zeros((9, 9), complex)
    for f, t, r, x, b in lines:
        s = 1 / complex(r, x)
        f -= 1
        t -= 1
        y[f, f] += s + 0.5j * b
        y[t, t] += s + 0.5j * b
        y[f, t] -= s
        y[t, f] -= s
    return y


def power_flow():
    y = ybus(LINES)
    mag = np.array([1.04, 1.025, 1.025] + [1.0] * 6)
    ang = np.zeros(9)
    psp = np.zeros(9)
    qsp = np.zeros(9)
    psp[1], psp[2] = 1.63, 0.85
    for b, (p, q) in LOADS.items():
        psp[b - 1] -= p
        qsp[b - 1] -= q
    pq = [3, 4, 5, 6, 7, 8]

    def mismatch(x):
        a = np.r_[0.0, x[:8]]
        m = mag.copy()
        m[pq] = x[8:]
        v = m * np.exp(1j * a)
        s = v * np.conj(y @ v)
        return np.r_[(psp - s.real)[1:], (qsp - s.imag)[pq]]

    x = np.r_[ang[1:], mag[pq]]
    for _ in range(50):
        f0 = mismatch(x)
        if np.max(np.abs(f0)) < 1e-13:
            break
        jac = np.zeros((14, 14))
        for k in range(14):
            e = np.zeros(14)
            e[k] = 1e-7
            jac[:, k] = (mismatch(x + e) - mismatch(x - e)) / 2e-7
        x = x - np.linalg.solve(jac, f0)
    ang[1:] = x[:8]
    mag[pq] = x[8:]
    return mag * np.exp(1j * ang), y


def reduce(v, lines, loads):
    y = ybus(lines)
    for b, (p, q) in loads.items():
        y[b - 1, b - 1] += (p - 1j * q) / abs(v[b - 1]) ** 2
    full = np.zeros((12, 12), complex)
    full[3:, 3:] = y
    for i in range(3):
        g = 1 / (1j * XDP[i])
        full[i, i] += g
        full[i, 3 + i] -= g
        full[3 + i, i] -= g
        full[3 + i, 3 + i] += g
    a, b, c, d = full[:3, :3], full[:3, 3:], full[3:, :3], full[3:, 3:]
    red = a - b @ np.linalg.solve(d, c)
    return (red + red.T) / 2


def fmt(a):
    return "[" + ", ".join(repr(float(x)) for x in a) + "]"


def fmt2(m):
    return "[" + ", ".join(fmt(r) for r in m) + "]"


def main():
    v, _ = power_flow()
    s = v[:3] * np.conj(ybus(LINES) @ v)[:3]
    e = v[:3] + 1j * XDP * np.conj(s / v[:3])
    yr = reduce(v, LINES, LOADS)
    pm = np.real(e * np.conj(yr @ e))
    m = 2 * H / (2 * np.pi * F_HZ)
    out = []
    out.append("# WSCC 3-machine, 9-bus system reduced to the generator internal buses.")
    out.append("# Generated by tools/wscc_kron.py. Per-unit on 100 MVA; omega in rad/s.")
    out.append("")
    out.append("[meta]")
    out.append('name = "wscc9"')
    out.append("base_mva = 100.0")
    out.append(f"frequency_hz = {F_HZ}")
    out.append("")
    out.append("[base]")
    out.append(f"m = {fmt(m)}")
    out.append(f"d = {fmt(DAMPING_PER_INERTIA * m)}")
    out.append(f"e_mag = {fmt(np.abs(e))}")
    out.append(f"p_m = {fmt(pm)}")
    out.append(f"delta0 = {fmt(np.angle(e))}")
    out.append(f"g = {fmt2(yr.real)}")
    out.append(f"b = {fmt2(yr.imag)}")
    scen = []
    for k in range(3, 9):
        f, t = LINES[k][:2]
        red = reduce(v, [l for j, l in enumerate(LINES) if j != k], LOADS)
        scen.append((f"line {f}-{t} out of service", red))
    for bus in (5, 6, 8):
        red = reduce(v, LINES, {b: x for b, x in LOADS.items() if b != bus})
        scen.append((f"load shunt at bus {bus} disconnected", red))
    for cid, (desc, red) in enumerate(scen):
        out.append("")
        out.append("[[scenario]]")
        out.append(f"class_id = {cid}")
        out.append(f'description = "{desc}"')
        out.append(f"g = {fmt2(red.real)}")
        out.append(f"b = {fmt2(red.imag)}")
    print("\n".join(out))


if __name__ == "__main__":
    main()
