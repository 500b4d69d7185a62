"""Per-second simulation kernel.

Every lane is a ring buffer of vehicles ordered front (nearest the stop
line) to back. Positions are distances to the stop line in metres.
"""
import numpy as np

from ._accel import kernel


@kernel
def advance_lanes(
    t0, n_steps, green, lane_mov, mov_lanes, arrivals,
    pos, speed, wait, spawn_t, vid, head, count, last_dep,
    crossings, occ, queue, totals,
    approach_m, v_free, jam_m, headway_s, zone_m, stop_speed,
):
    """Advance every lane by ``n_steps`` one-second ticks under a fixed display.

    ``totals`` is ``[spawned, departed, waiting_s, next_id]``.
    """
    n_lanes = lane_mov.shape[0]
    cap = pos.shape[1]
    occ_acc = np.zeros(8)
    q_acc = np.zeros(8, dtype=np.int64)
    for s in range(n_steps):
        t = t0 + s
        occ_acc[:] = 0.0
        q_acc[:] = 0
        for ln in range(n_lanes):
            m = lane_mov[ln]
            c = count[ln]
            h = head[ln]
            # stop-line discharge, one vehicle per saturation headway
            if c > 0 and green[m] and t - last_dep[ln] >= headway_s:
                if pos[ln, h] <= v_free:
                    h = (h + 1) % cap
                    c -= 1
                    totals[1] += 1.0
                    crossings[t, m] += 1
                    last_dep[ln] = t
            limit = 0.0
            n_zone = 0
            n_stop = 0
            for k in range(c):
                i = (h + k) % cap
                p = pos[ln, i]
                q = p - v_free
                if q < limit:
                    q = limit
                if q > approach_m:
                    q = approach_m
                sp = p - q
                if sp < 0.0:
                    sp = 0.0
                pos[ln, i] = q
                speed[ln, i] = sp
                if sp <= stop_speed:
                    wait[ln, i] += 1.0
                    totals[2] += 1.0
                if q < zone_m:
                    n_zone += 1
                    if sp <= stop_speed:
                        n_stop += 1
                limit = q + jam_m
            for _ in range(arrivals[t, ln]):
                i = (h + c) % cap
                pos[ln, i] = approach_m
                speed[ln, i] = v_free
                wait[ln, i] = 0.0
                spawn_t[ln, i] = t
                vid[ln, i] = np.int64(totals[3])
                totals[3] += 1.0
                totals[0] += 1.0
                c += 1
            head[ln] = h
            count[ln] = c
            cover = n_zone * jam_m / zone_m
            if cover > 1.0:
                cover = 1.0
            occ_acc[m] += cover
            q_acc[m] += n_stop
        for m in range(8):
            if mov_lanes[m] > 0:
                occ[t, m] = occ_acc[m] / mov_lanes[m]
            queue[t, m] = q_acc[m]
