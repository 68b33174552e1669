import pytest
import torch

from revdistill.backbone import FAMILIES, BackboneSpec, FeaturePyramid, extract_features, load_teacher
from revdistill.decoder import DecoderSpec, build_decoder, check_mirror, decode
from revdistill.distill import build_model, kd_loss
from revdistill.errors import ConfigError, ShapeError
from revdistill.ocbe import OCBE, OcbeConfig, build_ocbe, mff_fuse, oce_embed


def fake_pyramid(shapes, batch=2):
    return FeaturePyramid([torch.randn(batch, *s) for s in shapes], (1, 2, 3))


@pytest.mark.parametrize(
    "res,fused,code",
    [(256, (448, 16, 16), (512, 8, 8)), (128, (448, 8, 8), (512, 4, 4))],
)
def test_resnet18_fuse_and_embed_shapes(res, fused, code):
    # shapes follow from stride-2 3x3 convs (two for stage 1, one for stage 2) and a stride-2 stage-4 block
    spec = BackboneSpec("resnet18", res, weights_source="random")
    ocbe = OCBE(OcbeConfig("resnet18"))
    pyr = fake_pyramid(spec.pyramid_shapes())
    f = mff_fuse(pyr, ocbe)
    assert tuple(f.shape[1:]) == fused
    assert ocbe.cfg.fused_channels == 448
    phi = oce_embed(f, ocbe)
    assert tuple(phi.shape[1:]) == code == ocbe.cfg.code_shape(res)


def test_mismatched_batch_sizes():
    spec = BackboneSpec("resnet18", 64, weights_source="random")
    shapes = spec.pyramid_shapes()
    pyr = FeaturePyramid([torch.randn(2, *shapes[0]), torch.randn(3, *shapes[1]), torch.randn(2, *shapes[2])], (1, 2, 3))
    with pytest.raises(ShapeError):
        mff_fuse(pyr, OCBE(OcbeConfig("resnet18")))


def test_oce_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        oce_embed(torch.randn(1, 100, 4, 4), OCBE(OcbeConfig("resnet18")))


def test_ocbe_deterministic_in_eval(small_model):
    teacher, ocbe, _ = small_model
    ocbe.eval()
    pyr = extract_features(teacher, torch.randn(2, 3, 64, 64))
    assert torch.equal(ocbe(pyr), ocbe(pyr))


@pytest.mark.parametrize("family", sorted(FAMILIES))
@pytest.mark.parametrize("res", [128, 256])
def test_bottleneck_smaller_than_every_level(family, res):
    spec = BackboneSpec(family, res, weights_source="random")
    cfg = OcbeConfig(family)
    code = cfg.code_shape(res)
    n_code = code[0] * code[1] * code[2]
    for c, h, w in spec.pyramid_shapes():
        assert n_code < c * h * w
        assert code[1] < h


def test_variant_validation(r18_teacher_64):
    with pytest.raises(ConfigError):
        OcbeConfig("resnet18", variant="nope")
    with pytest.raises(ConfigError):
        OcbeConfig("resnet18", stages_used=(1, 2), variant="oce")
    with pytest.raises(ConfigError, match="keep_stage4"):
        build_ocbe(r18_teacher_64, variant="pre")


def test_trainable_parameter_sets(small_model):
    teacher, ocbe, decoder = small_model
    ocbe_ids = {id(p) for p in ocbe.trainable_parameters()}
    assert ocbe_ids == {id(p) for p in ocbe.parameters()}
    assert all(p.requires_grad for p in ocbe.parameters())
    assert not ocbe_ids & {id(p) for p in teacher.parameters()}


def test_pre_variant_is_frozen():
    spec = BackboneSpec("resnet18", 64, weights_source="random")
    teacher = load_teacher(spec, keep_stage4=True)
    ocbe = build_ocbe(teacher, "pre")
    assert ocbe.trainable_parameters() == []
    ocbe.train()
    assert not ocbe.embed.training
    pyr = extract_features(teacher, torch.randn(1, 3, 64, 64))
    assert tuple(ocbe(pyr).shape) == (1, 512, 2, 2)


def _step(teacher, ocbe, decoder, x, lr=0.01):
    opt = torch.optim.Adam(list(ocbe.parameters()) + list(decoder.parameters()), lr=lr)
    ocbe.train()
    decoder.train()
    for _ in range(2):
        pyr = extract_features(teacher, x)
        loss = kd_loss(pyr, decoder(ocbe(pyr)))
        opt.zero_grad()
        loss.backward()
        opt.step()


def test_ocbe_finite_difference_flow(small_model):
    # residual branches start with zero-scaled BN, so take two steps before probing
    teacher, ocbe, decoder = small_model
    torch.manual_seed(1)
    x = torch.randn(4, 3, 64, 64)
    _step(teacher, ocbe, decoder, x)
    ocbe.eval()
    decoder.eval()
    pyr = extract_features(teacher, x)

    def loss():
        with torch.no_grad():
            return float(kd_loss(pyr, decoder(ocbe(pyr))))

    base = loss()
    for name, p in ocbe.named_parameters():
        with torch.no_grad():
            saved = p.clone()
            p.add_(0.5 * (saved.abs().mean() + 0.1) * torch.sign(torch.randn_like(p)))
        changed = loss() != base
        with torch.no_grad():
            p.copy_(saved)
        assert changed, f"perturbing {name} left the loss unchanged"


def test_all_decoder_parameters_get_gradient(small_model):
    teacher, ocbe, decoder = small_model
    torch.manual_seed(2)
    x = torch.randn(4, 3, 64, 64)
    _step(teacher, ocbe, decoder, x)
    pyr = extract_features(teacher, x)
    loss = kd_loss(pyr, decoder(ocbe(pyr)))
    decoder.zero_grad()
    ocbe.zero_grad()
    loss.backward()
    for name, p in list(decoder.named_parameters()) + list(ocbe.named_parameters()):
        assert p.requires_grad
        assert p.grad is not None and p.grad.abs().sum() > 0, name


@pytest.mark.parametrize(
    "family,res,expected",
    [
        ("resnet18", 256, [(64, 64, 64), (128, 32, 32), (256, 16, 16)]),
        ("wide_resnet50", 256, [(256, 64, 64), (512, 32, 32), (1024, 16, 16)]),
    ],
)
def test_decoder_output_shapes(family, res, expected):
    spec = BackboneSpec(family, res, weights_source="random")
    decoder = build_decoder(DecoderSpec(family)).eval()
    assert expected == spec.pyramid_shapes()  # mirror oracle = teacher pyramid shapes
    with torch.no_grad():
        out = decoder(torch.zeros(1, *OcbeConfig(family).code_shape(res)))
    assert out.shapes == expected
    assert out.source == "student"
    assert decoder.decode_order == (3, 2, 1)


def test_decoder_block_counts_mirror_encoder():
    for family, info in FAMILIES.items():
        decoder = build_decoder(DecoderSpec(family))
        for k in (1, 2, 3):
            assert len(decoder.stages[f"stage{k}"]) == info.blocks_per_stage[k - 1]
        # every stage opens with a 2x2 stride-2 transposed conv shortcut
        for k in (1, 2, 3):
            up = decoder.stages[f"stage{k}"][0].upsample[0]
            assert isinstance(up, torch.nn.ConvTranspose2d)
            assert up.kernel_size == (2, 2) and up.stride == (2, 2)


def test_decoder_deterministic_and_batched():
    decoder = build_decoder(DecoderSpec("resnet18")).eval()
    code = torch.zeros(3, 512, 2, 2)
    with torch.no_grad():
        a, b = decoder(code), decoder(code)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert all(f.shape[0] == 3 for f in a)


@pytest.mark.parametrize("family", sorted(FAMILIES))
@pytest.mark.parametrize("res", [64, 128])
def test_mirror_shape_law(family, res):
    spec = BackboneSpec(family, res, weights_source="random")
    teacher, ocbe, decoder = build_model(spec)
    ocbe.eval()
    decoder.eval()
    with torch.no_grad():
        t = extract_features(teacher, torch.randn(1, 3, res, res))
        s = decode(decoder, ocbe(t), teacher=t)
    assert t.shapes == s.shapes


def test_decode_shape_errors():
    decoder = build_decoder(DecoderSpec("resnet18"))
    with pytest.raises(ShapeError):
        decoder(torch.zeros(1, 256, 2, 2))
    t = FeaturePyramid([torch.zeros(1, 64, 8, 8), torch.zeros(1, 128, 4, 4), torch.zeros(1, 256, 2, 2)], (1, 2, 3))
    s = FeaturePyramid([torch.zeros(1, 64, 8, 8), torch.zeros(1, 128, 8, 8), torch.zeros(1, 256, 2, 2)], (1, 2, 3), "student")
    with pytest.raises(ShapeError, match="stage 2"):
        check_mirror(t, s)


def test_decoder_emits_subset():
    decoder = build_decoder(DecoderSpec("resnet18", (2,)))
    out = decoder(torch.zeros(1, 512, 2, 2))
    assert out.stage_ids == (2,) and out.shapes == [(128, 8, 8)]
