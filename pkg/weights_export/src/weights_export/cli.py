"""Command line entry point: export-weights --source <ckpt> --out <vggw> --fixtures <dir>."""

import argparse
import sys

from .exporter import ExportError, export_weights


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="export-weights",
        description="Convert a VGG-19 torch checkpoint to the VGGW weight format.",
    )
    parser.add_argument("--source", required=True, help="torch checkpoint (.pth state dict)")
    parser.add_argument("--out", required=True, help="output VGGW file")
    parser.add_argument("--fixtures", required=True, help="directory for probe image, golden activations and manifest")
    args = parser.parse_args(argv)
    try:
        manifest = export_weights(args.source, args.out, args.fixtures)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out} (crc32 {manifest.output_crc32:#010x}, {len(manifest.layer_map)} conv layers)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
