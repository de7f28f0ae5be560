"""Finite-difference gradient check of every variant and ablation row on the toy config."""

import time

from mvirts.gradcheck import check_model_gradients, gradcheck_configurations

TOL = 1e-4


def main():
    start = time.time()
    worst_overall = 0.0
    for name, cfg in gradcheck_configurations():
        t = time.time()
        report = check_model_gradients(cfg)
        param, worst = max(report.items(), key=lambda kv: kv[1])
        worst_overall = max(worst_overall, worst)
        status = "ok" if worst < TOL else "FAIL"
        print(f"{name:16s} worst {worst:.2e} at {param:22s} {time.time() - t:5.1f}s {status}", flush=True)
    print(f"total {time.time() - start:.0f}s, worst {worst_overall:.2e}")


if __name__ == "__main__":
    main()
