#!/usr/bin/env python3
"""
pandense self-check
Environment and numerical checks that run in well under a minute without pytest.
"""

import sys
import tempfile

import numpy as np


def print_header():
    print("=" * 60)
    print("🧪 pandense - pan-density crowd counting self-check")
    print("=" * 60)
    print()


def check_python():
    """Check Python version"""
    print("✓ Checking Python version...")
    if sys.version_info < (3, 9):
        print("❌ Python 3.9 or higher is required!")
        return False
    print(f"  Python {sys.version.split()[0]} detected")
    return True


def check_dependencies():
    """Check if required packages are installed"""
    print("\n✓ Checking dependencies...")
    required_packages = ["numpy", "sklearn", "pandas", "dotenv", "PIL", "tqdm", "matplotlib", "threadpoolctl"]

    missing_packages = []
    for package in required_packages:
        try:
            __import__(package)
            print(f"  ✓ {package}")
        except ImportError:
            missing_packages.append(package)
            print(f"  ❌ {package} - MISSING")

    if missing_packages:
        print(f"\n⚠️  Missing packages: {', '.join(missing_packages)}")
        print("   Run: pip install -r requirements.txt")
        return False
    return True


def _conv_gradient(rng):
    from tensor_core import Tensor, conv2d, grad_check, tensor_sum

    x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True, dtype=np.float64)
    k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
    err = grad_check(lambda x, k, b: tensor_sum(conv2d(x, k, b) * conv2d(x, k, b)), [x, k, b])
    return err < 1e-5, f"max relative error {err:.2e}"


def _batchnorm_gradient(rng):
    from tensor_core import BatchNormState, Tensor, batchnorm2d, grad_check, tensor_sum

    x = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True, dtype=np.float64)
    gamma = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
    beta = Tensor(rng.standard_normal(3), requires_grad=True, dtype=np.float64)
    weights = Tensor(rng.standard_normal((2, 3, 3, 3)), dtype=np.float64)

    def loss(x, gamma, beta):
        state = BatchNormState(np.zeros(3), np.ones(3))
        return tensor_sum(batchnorm2d(x, gamma, beta, state, "train") * weights)

    err = grad_check(loss, [x, gamma, beta])
    return err < 1e-4, f"max relative error {err:.2e}"


def _padnet_gradient(rng):
    from padnet_model import ModelSpec, build_model, padnet_forward
    from tensor_core import Tensor, grad_check
    from training import compute_loss

    model = build_model(ModelSpec(N=2, channel_scale=0.0625, fen_channels=[4, 4]), seed=0, check_flow=False)
    model.to_dtype(np.float64)
    # shifts off zero keep ReLU inputs away from the kink
    for name, param in model.named_parameters():
        if name.endswith((".bias", ".beta")):
            param.data[...] = rng.uniform(0.05, 0.2, param.shape)
    image = Tensor(rng.standard_normal((1, 1, 32, 32)), dtype=np.float64)
    gt = Tensor(np.abs(rng.standard_normal((1, 1, 8, 8))) * 0.1, dtype=np.float64)

    def loss(*_):
        pred, w = padnet_forward(model, image)
        return compute_loss(pred, gt, w, [1], 1.0)[0]

    params = model.parameters()
    err = grad_check(loss, params, eps=1e-6, max_coords=2, rng=rng)
    return err < 1e-4, f"max relative error {err:.2e} over {len(params)} parameters"


def _mass_conservation(rng):
    from geometry import KernelPolicy, PointAnnotation, generate_density_map, sum_pool_downsample

    worst = 0.0
    for _ in range(20):
        count = int(rng.integers(0, 60))
        points = rng.random((count, 2)) * 64
        ann = PointAnnotation(64, 64, points)
        density = generate_density_map(ann, KernelPolicy())
        pooled = sum_pool_downsample(density, 4)
        worst = max(worst, abs(density.count - count) / max(count, 1), abs(pooled.count - count) / max(count, 1))
    return worst < 1e-4, f"worst relative mass error {worst:.2e}"


def _metric_locality(rng):
    from metrics import mae_rmse, pmae_prmse

    est = np.ones((4, 4))
    gt = np.zeros((4, 4))
    gt[:2, :2] = 4.0
    mae, _ = mae_rmse([est.sum()], [gt.sum()])
    pmae, _ = pmae_prmse([est], [gt], 4)
    same = pmae_prmse([est], [gt], 1) == mae_rmse([est.sum()], [gt.sum()])
    return mae == 0.0 and abs(pmae - 6.0) < 1e-12 and same, f"MAE {mae}, PMAE@4 {pmae}"


def _dense_degree_oracle(rng):
    from geometry import dense_degree

    worst = 0.0
    for _ in range(20):
        points = rng.random((30, 2)) * 100
        dists = np.sqrt(((points[:, None] - points[None]) ** 2).sum(-1))
        brute = np.sort(dists, axis=1)[:, 1:6].sum(axis=1).mean()
        worst = max(worst, abs(dense_degree(points, 5) - brute))
    return worst < 1e-9, f"worst absolute error {worst:.2e}"


def _checkpoint_roundtrip(rng):
    from padnet_model import ModelSpec, build_model, padnet_forward
    from storage import load_checkpoint, save_checkpoint
    from tensor_core import Tensor, no_grad

    model = build_model(ModelSpec(N=2), seed=3, check_flow=False).eval()
    image = Tensor(rng.random((1, 1, 32, 32)).astype(np.float32))
    with tempfile.TemporaryDirectory() as tmp:
        save_checkpoint(model, tmp)
        loaded, _ = load_checkpoint(tmp, expected_spec=model.spec)
    with no_grad():
        before = padnet_forward(model, image)[0].data
        after = padnet_forward(loaded, image)[0].data
    return bool(np.array_equal(before, after)), "bit-identical eval forward" if np.array_equal(before, after) else "outputs differ"


CHECKS = [
    ("conv2d gradient", _conv_gradient),
    ("batchnorm gradient", _batchnorm_gradient),
    ("PaDNet-2 loss gradient", _padnet_gradient),
    ("density map mass", _mass_conservation),
    ("PMAE locality", _metric_locality),
    ("dense degree oracle", _dense_degree_oracle),
    ("checkpoint round-trip", _checkpoint_roundtrip),
]


def run_checks(seed: int = 0) -> bool:
    """Run every numerical check; prints a ✓/❌ line per check and returns True when all pass."""
    print_header()
    if not check_python() or not check_dependencies():
        print("\n❌ Please install missing dependencies first:")
        print("   pip install -r requirements.txt")
        return False

    print("\n✓ Running numerical checks...")
    rng = np.random.default_rng(seed)
    failures = 0
    for name, check in CHECKS:
        try:
            ok, detail = check(rng)
        except Exception as e:
            ok, detail = False, f"{type(e).__name__}: {e}"
        failures += not ok
        print(f"  {'✓' if ok else '❌'} {name:<24} {detail}")

    if failures:
        print(f"\n❌ {failures} of {len(CHECKS)} checks failed")
        return False
    print("\n✅ All checks passed!")
    return True


if __name__ == "__main__":
    sys.exit(0 if run_checks() else 1)
