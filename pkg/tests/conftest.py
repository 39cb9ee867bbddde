import pytest
import torch

from chunkflow.codec import CodecConfig
from chunkflow.conditioning import AudioCondition, ConditioningBundle, ContinuityRef, IdentityCondition
from chunkflow.velocity import ModelConfig, VelocityNet

ACCEPTANCE_KEY = pytest.StashKey[list]()

# 1x1 latent grid, 4 channels, two latent frames, one context frame: 174 parameters.
MICRO = ModelConfig(latent_length=2, latent_hw=(1, 1), channels=4, context_length=1, audio_dim=2,
                    dim=3, heads=1, depth=1, ffn_mult=1, time_freqs=4, zero_head=False)
MICRO_CODEC = CodecConfig(temporal_stride=1)


def micro_model(role="generic", seed=0) -> VelocityNet:
    return VelocityNet(MICRO, role=role, seed=seed).double()


def micro_conds(seed=0, batch=2, provenance="gt") -> ConditioningBundle:
    g = torch.Generator().manual_seed(seed)
    L, C = MICRO.latent_length, MICRO.channels
    audio = torch.randn(batch, L, MICRO.audio_dim, generator=g, dtype=torch.float64)
    ident = torch.randn(batch, L, 1, 1, C, generator=g, dtype=torch.float64)
    kappa = torch.randn(batch, MICRO.context_length, 1, 1, C, generator=g, dtype=torch.float64)
    return ConditioningBundle(AudioCondition(audio, ((0, 1), (1, 2))), IdentityCondition(ident, "TRE"),
                              ContinuityRef(kappa, provenance))


def flat_grad(loss, params):
    grads = torch.autograd.grad(loss, params)
    return torch.cat([g.reshape(-1) for g in grads])


def finite_difference(fn, params, h=1e-6):
    """Central differences of scalar ``fn()`` w.r.t. every element of ``params`` (modified in place)."""
    out = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(fn())
                flat[i] = orig - h
                down = float(fn())
                flat[i] = orig
                out.append((up - down) / (2 * h))
    return torch.tensor(out, dtype=torch.float64)


def rel_error(a, b):
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))


@pytest.fixture
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
