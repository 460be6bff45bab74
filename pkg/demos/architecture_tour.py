"""
A tour of the network
=====================

Builds the full-size encoder, counts parameters per stage, then pushes a
random image through the desk-scale variant and looks at what comes out.
"""

import torch

from accovidnet.model import (
    PEPXConfig,
    EncoderConfig,
    build_classifier,
    build_encoder,
    build_projection,
    count_parameters,
)

# one PEPX block: 1x1 in->proj1, 1x1 proj1->expand, depthwise 3x3, 1x1 expand->proj2, 1x1 proj2->out
block = PEPXConfig(16, 8, 8, 24, 16, bias=False)
print("PEPX(16 -> 16) weights:", block.parameter_count())

full = EncoderConfig()
encoder = build_encoder(full, seed=0)
print("full encoder parameters:", count_parameters(encoder))
for i, stage in enumerate(full.stages):
    module = getattr(encoder, f"stage{i + 1}")
    gated = "gated" if stage.attention_gate else "plain"
    print(f"  stage{i + 1}: {stage.pepx_count} PEPX -> {stage.out_channels} ch, {gated}, {count_parameters(module)} params")

with torch.no_grad():
    h = encoder(torch.rand(2, 3, 224, 224))
print("feature vector:", tuple(h.shape))

# the small variant used for experiments on a laptop
desk = EncoderConfig.desk(32)
small = build_encoder(desk, seed=0)
head, clf = build_projection(seed=0), build_classifier(seed=0)
x = torch.rand(4, 3, 32, 32)
with torch.no_grad():
    h = small(x)
    z = head(h)
    p = clf(h)
print("desk encoder parameters:", count_parameters(small))
print("embedding norms:", z.norm(dim=1))
print("class probabilities:\n", p)
