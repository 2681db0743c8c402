#!/usr/bin/env python3
"""Writes the bundled architecture descriptions under archs/."""

import json
import pathlib

OUT = pathlib.Path(__file__).resolve().parent.parent / "archs"


def conv(name, out, kernel, stride=1, inputs=None, group=None, relu=True, bn=True):
    e = {"name": name, "kind": "conv", "out": out, "kernel": kernel, "stride": stride, "bn": bn, "relu": relu}
    if inputs:
        e["inputs"] = inputs
    if group:
        e["coupling_group"] = group
    return e


def resnet50():
    layers = [conv("stem", 64, 7, 2, ["input"]),
              {"name": "stem_pool", "kind": "maxpool", "kernel": 3, "stride": 2, "padding": 1}]
    prev = "stem_pool"
    for stage, (blocks, mid, stride) in enumerate([(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)], start=1):
        out = mid * 4
        group = f"stage{stage}"
        for b in range(blocks):
            p = f"s{stage}b{b}"
            s = stride if b == 0 else 1
            layers.append(conv(p + "_c1", mid, 1, 1, [prev]))
            layers.append(conv(p + "_c2", mid, 3, s))
            layers.append(conv(p + "_c3", out, 1, 1, group=group, relu=False))
            shortcut = prev
            if b == 0:
                layers.append(conv(p + "_down", out, 1, s, [prev], group=group, relu=False))
                shortcut = p + "_down"
            layers.append({"name": p + "_sum", "kind": "add", "inputs": [p + "_c3", shortcut], "relu": True})
            prev = p + "_sum"
    layers.append({"name": "gap", "kind": "avgpool"})
    layers.append({"name": "fc", "kind": "linear", "out": 1000, "group_count": 1})
    return {"name": "resnet50", "input_channels": 3, "reference_resolution": [224, 224], "group_count": 16,
            "min_keep_ratio": 0.2, "layers": layers}


def mobilenetv2():
    layers = [conv("stem", 32, 3, 2, ["input"], group="b0")]
    prev, prev_c, prev_group = "stem", 32, "b0"
    idx = 0
    for t, c, n, s in [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2),
                       (6, 320, 1, 1)]:
        for i in range(n):
            idx += 1
            p = f"b{idx}"
            stride = s if i == 0 else 1
            hidden = prev_c * t
            residual = stride == 1 and prev_c == c
            if t != 1:
                layers.append(conv(p + "_expand", hidden, 1, 1, [prev], group=p + "_hidden"))
                dw_group = p + "_hidden"
                dw_in = p + "_expand"
            else:
                dw_group = prev_group
                dw_in = prev
            layers.append({"name": p + "_dw", "kind": "dwconv", "kernel": 3, "stride": stride, "inputs": [dw_in],
                           "coupling_group": dw_group})
            out_group = prev_group if residual else p + "_out"
            layers.append(conv(p + "_project", c, 1, 1, group=out_group, relu=False))
            if residual:
                layers.append({"name": p + "_sum", "kind": "add", "inputs": [p + "_project", prev]})
                prev = p + "_sum"
            else:
                prev = p + "_project"
            prev_c, prev_group = c, out_group
    layers.append(conv("last", 1280, 1, 1, [prev]))
    layers.append({"name": "gap", "kind": "avgpool"})
    layers.append({"name": "fc", "kind": "linear", "out": 1000, "group_count": 1})
    return {"name": "mobilenetv2", "input_channels": 3, "reference_resolution": [224, 224], "group_count": 8,
            "min_keep_ratio": 0.2, "layers": layers}


def vgg16():
    layers = []
    prev = "input"
    for stage, (n, c) in enumerate([(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)], start=1):
        for i in range(n):
            name = f"conv{stage}_{i + 1}"
            layers.append(conv(name, c, 3, 1, [prev]))
            prev = name
        layers.append({"name": f"pool{stage}", "kind": "maxpool", "kernel": 2, "stride": 2, "padding": 0})
        prev = f"pool{stage}"
    layers.append({"name": "fc6", "kind": "linear", "out": 4096, "relu": True})
    layers.append({"name": "fc7", "kind": "linear", "out": 4096, "relu": True})
    layers.append({"name": "fc8", "kind": "linear", "out": 1000, "group_count": 1})
    return {"name": "vgg16", "input_channels": 3, "reference_resolution": [224, 224], "group_count": 16,
            "min_keep_ratio": 0.2, "layers": layers}


def desk_resnet():
    layers = [
        conv("stem", 16, 3, 2, ["input"], group="stage1"),
        conv("b1a", 16, 3),
        conv("b1b", 16, 3, group="stage1", relu=False),
        {"name": "sum1", "kind": "add", "inputs": ["stem", "b1b"], "relu": True},
        conv("down2", 32, 3, 2, group="stage2"),
        conv("b2a", 32, 3),
        conv("b2b", 32, 3, group="stage2", relu=False),
        {"name": "sum2", "kind": "add", "inputs": ["down2", "b2b"], "relu": True},
        conv("down3", 64, 3, 2),
        {"name": "gap", "kind": "avgpool"},
        {"name": "fc", "kind": "linear", "out": 10, "group_count": 1},
    ]
    return {"name": "desk_resnet", "input_channels": 3, "reference_resolution": [32, 32], "group_count": 8,
            "min_keep_ratio": 0.2, "layers": layers}


def main():
    OUT.mkdir(exist_ok=True)
    for fn in (resnet50, mobilenetv2, vgg16, desk_resnet):
        doc = fn()
        (OUT / f"{doc['name']}.json").write_text(json.dumps(doc, indent=1) + "\n")


if __name__ == "__main__":
    main()
