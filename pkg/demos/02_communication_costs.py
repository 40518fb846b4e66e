"""Compare per-block communication volume of two sharding strategies.

Head-sharded ("tensor-parallel") execution pays two ring all-reduces per
projection and cannot use more devices than attention heads.  Axial
sharding replaces them with cheap axis switches plus three small factor
gathers, so its volume shrinks as the mesh grows.
"""

from evoplan import CommModel, HeadLimitError, activation_memory


def main() -> None:
    model = CommModel(n_heads=4)

    print("per-device volume in units of K (one block, forward + backward)")
    print(f"{'devices':>8} {'tensor':>10} {'axial':>10} {'ratio':>8}")
    for n in (1, 2, 4):
        report = model.compare(1.0, n)
        ratio = f"{report.ratio:.2f}x" if report.dap_volume else "-"
        print(f"{n:>8} {report.tp_volume:>10.3f} "
              f"{report.dap_volume:>10.3f} {ratio:>8}")

    print("\naxial breakdown at 4 devices:")
    for part, value in model.dap_breakdown(1.0, 4).items():
        print(f"  {part:16s} {value:.3f} K")

    print("\nhead-sharding cannot scale past the head count:")
    try:
        model.tp_volume(1.0, 8)
    except HeadLimitError as exc:
        print(f"  {exc}")
    for n in (8, 16, 64):
        print(f"  axial at {n:>2} devices: "
              f"{model.dap_volume(1.0, n):.3f} K (keeps shrinking)")

    bytes_48 = activation_memory(384, 4, 48, 2)
    print(f"\nattention activations at 384 residues, 4 heads, 48 layers, "
          f"fp16:\n  {bytes_48:,} bytes = {bytes_48 / 1024 ** 3:.1f} GiB "
          f"(> 20 GiB on a single device)")


if __name__ == "__main__":
    main()
