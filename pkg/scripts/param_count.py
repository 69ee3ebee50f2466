"""Parameter accounting at the reference dimensions."""
from semicap.trainer import REFERENCE_DIMS, param_count


def main():
    semantic = param_count(**{**REFERENCE_DIMS, "d": REFERENCE_DIMS["F"]})
    visual = param_count(**REFERENCE_DIMS)
    print(f"dims: {REFERENCE_DIMS}")
    print(f"reviewer (semantic) {semantic['reviewer']:>12,d}")
    print(f"reviewer (visual)   {visual['reviewer']:>12,d}")
    print(f"decoder             {visual['decoder']:>12,d}")
    print(f"init maps           {visual['init']:>12,d}")
    print(f"total (visual)      {visual['total']:>12,d}")
    print(f"pretrainable share  {visual['pretrainable_fraction']:.4f}")


if __name__ == "__main__":
    main()
