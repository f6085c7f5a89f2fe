"""Print parameter counts, FLOPs and the int8 size audit for both profiles."""
from fcoslite.detector import DetectorSpec, build_student, build_teacher, count_flops, count_params
from fcoslite.quant import size_audit


def main() -> None:
    for spec in (DetectorSpec.paper(), DetectorSpec()):
        shape = (spec.in_channels, *spec.input_size)
        for name, net in (("student", build_student(spec)), ("teacher R50", build_teacher(50, spec))):
            audit = size_audit(net)
            print(
                f"{spec.profile:>5} {name:<12} params {count_params(net) / 1e6:7.3f} M  "
                f"GFLOPs {count_flops(net, shape) / 1e9:7.3f}  {audit.summary_line()}"
            )


if __name__ == "__main__":
    main()
