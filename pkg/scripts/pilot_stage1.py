"""Short stage-1 pilot: trains on /tmp/pilot/ds and prints an eval report."""
import sys
import time

from tridiff import synthscenes as scn
from tridiff import trainer as tr
from tridiff.cli import evaluate_autoencoder
from tridiff.config import RunConfig


def main(steps=1500):
    ds = scn.DatasetFolder("/tmp/pilot/ds")
    cfg = RunConfig()
    t0 = time.time()

    def cb(step, rep):
        if step % 100 == 0:
            print(f"step {step} l_px={rep['l_px']:.4f} l_2d={rep['l_2d']:.4f}"
                  f" l_3d={rep['l_3d']:.4f} d_img={rep.get('d_loss_img', 0):.3f}"
                  f" d_dep={rep.get('d_loss_depth', 0):.3f}"
                  f" g_img={rep.get('g_adv_img', 0):.3f}", flush=True)

    ckpt = tr.run_stage1(ds, "/tmp/pilot/run", cfg, steps=steps, log_cb=cb)
    print("trained", ckpt, f"{time.time() - t0:.0f}s", flush=True)
    model = tr.load_autoencoder(ckpt, cfg)
    rep = evaluate_autoencoder(model, ds, cfg, limit=32)
    print("EVAL", rep, flush=True)


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1500)
