"""Gradient verification: every hand-derived VJP against central differences,
then the full render -> tone -> composite -> loss chain on a tiny scene.

The renderer replays its exact forward sample set (counter-based RNG), so the
fixed-seed estimator is a deterministic function and finite differences are a
valid oracle for the adjoint.
"""

from dropin.gradcheck import check_bake, check_map_ops, check_render_chain, check_sg_eval, check_tonemap

for name, rep in check_sg_eval()[:3] + check_bake() + check_map_ops() + check_tonemap():
    print(f"{name:<28} max_rel={rep.max_rel_error:.2e}  ({rep.n_checked} coords)  "
          f"{'ok' if rep.passed else 'FAIL'}")

print("\nfull chain (8x8 render, 4+4 lobes, both tone curves, 16 spp):")
for name, rep in check_render_chain():
    print(f"{name:<28} max_rel={rep.max_rel_error:.2e}  ({rep.n_checked} coords)  "
          f"{'ok' if rep.passed else 'FAIL'}")
