"""
ニューラルネット部品（全結合・GRU・勾配・Adam・チェックポイント）のテスト
"""
import math

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck
from torch.func import functional_call

from qmix_agent import QmixAgentNet, QmixMixer
from rl_nn import (
    DTYPE, GruCell, Mlp, NonFiniteError, adam_update, backward, check_finite, gru_step, load_checkpoint,
    make_adam, mlp_forward, save_checkpoint, seeded,
)
from sac_agent import SacAgent, SacBatch, sac_actor_loss, sac_alpha_loss, sac_critic_loss, sac_targets
from sim_core import ContractViolation

GRAD_CONFIGS = 100


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def gradients_match(modules, inputs, forward):
    """
    モジュール群のパラメータと入力について中心差分と解析勾配を比べる

    forward(params_by_module, *inputs) はスカラーまたはテンソルを返す。
    """
    names = [[n for n, _ in m.named_parameters()] for m in modules]
    flat = tuple(p.detach().clone().requires_grad_(True) for m in modules for p in m.parameters())
    inputs = tuple(x.detach().clone().requires_grad_(True) for x in inputs)

    def fn(*args):
        params, k = [], 0
        for ns in names:
            params.append(dict(zip(ns, args[k:k + len(ns)])))
            k += len(ns)
        return forward(params, *args[k:])

    return gradcheck(fn, flat + inputs, eps=1e-6, atol=1e-8, rtol=1e-4)


# --- 順伝播 ---

def test_zero_mlp_outputs_zero():
    net = zero_(Mlp([3, 5, 2]))
    assert torch.equal(mlp_forward(net, [1.0, -2.0, 4.0]), torch.zeros(2, dtype=DTYPE))


def test_identity_linear_layer():
    net = Mlp([1, 1])
    with torch.no_grad():
        net.layers[0].weight.fill_(1.0)
        net.layers[0].bias.zero_()
    assert mlp_forward(net, [3.0]).item() == 3.0


def test_two_layer_hand_computed():
    net = Mlp([2, 2, 1])
    with torch.no_grad():
        net.layers[0].weight.copy_(torch.tensor([[1.0, -1.0], [2.0, 0.0]]))
        net.layers[0].bias.copy_(torch.tensor([0.0, -1.0]))
        net.layers[1].weight.copy_(torch.tensor([[3.0, 4.0]]))
        net.layers[1].bias.copy_(torch.tensor([0.5]))
    # 隠れ層 relu([-1, 1]) = [0, 1]
    assert mlp_forward(net, [1.0, 2.0]).item() == 4.5


def test_mlp_rejects_wrong_width():
    with pytest.raises(ContractViolation):
        mlp_forward(Mlp([3, 2]), [1.0, 2.0])
    with pytest.raises(ContractViolation):
        Mlp([3, 0])


def test_zero_gru_halves_hidden_state():
    cell = zero_(GruCell(2, 3))
    h = torch.tensor([0.4, -1.0, 2.0], dtype=DTYPE)
    out = gru_step(cell, [5.0, -5.0], h)
    assert torch.allclose(out, 0.5 * h, atol=0, rtol=0)
    assert torch.equal(gru_step(cell, [1.0, 1.0], torch.zeros(3, dtype=DTYPE)), torch.zeros(3, dtype=DTYPE))


def scalar_gru(cell, x, h):
    """GRU の式をスカラーのループで計算する"""
    H = cell.hidden_size
    wx = cell.w_x.weight.detach().numpy()
    bx = cell.w_x.bias.detach().numpy()
    uzr = cell.u_zr.weight.detach().numpy()
    uh = cell.u_h.weight.detach().numpy()

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    z, r = [], []
    for k in range(H):
        az = bx[k] + sum(wx[k, i] * x[i] for i in range(len(x))) + sum(uzr[k, j] * h[j] for j in range(H))
        ar = bx[H + k] + sum(wx[H + k, i] * x[i] for i in range(len(x))) + sum(uzr[H + k, j] * h[j] for j in range(H))
        z.append(sig(az))
        r.append(sig(ar))
    out = []
    for k in range(H):
        a = bx[2 * H + k] + sum(wx[2 * H + k, i] * x[i] for i in range(len(x)))
        a += sum(uh[k, j] * r[j] * h[j] for j in range(H))
        out.append((1 - z[k]) * h[k] + z[k] * math.tanh(a))
    return out


def test_gru_matches_scalar_loop():
    rng = np.random.default_rng(0)
    for seed in range(5):
        with seeded(seed):
            cell = GruCell(3, 4)
        x = rng.normal(size=3)
        h = rng.normal(size=4)
        got = gru_step(cell, x, h).detach().numpy()
        np.testing.assert_allclose(got, scalar_gru(cell, x, h), rtol=0, atol=1e-12)


def test_gru_rejects_wrong_shapes():
    with pytest.raises(ContractViolation):
        gru_step(GruCell(2, 3), [1.0, 2.0], torch.zeros(4, dtype=DTYPE))


def test_forward_is_deterministic():
    with seeded(1):
        net = Mlp([4, 8, 3])
    x = torch.randn(5, 4, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    assert torch.equal(net(x), net(x))


def test_seeded_initialization_is_reproducible_and_isolated():
    before = torch.random.get_rng_state()
    with seeded(7):
        a = Mlp([3, 4, 2])
    with seeded(7):
        b = Mlp([3, 4, 2])
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert torch.equal(torch.random.get_rng_state(), before)


# --- 勾配 ---

def test_gradient_of_linear_loss():
    net = Mlp([1, 1])
    loss = net(torch.tensor([2.0], dtype=DTYPE)).sum()
    grad_w, grad_b = backward(loss, list(net.parameters()))
    assert grad_w.item() == 2.0 and grad_b.item() == 1.0


def test_constant_loss_has_zero_gradients():
    net = Mlp([2, 3, 1])
    grads = backward(torch.tensor(3.0, dtype=DTYPE), list(net.parameters()))
    assert all(torch.count_nonzero(g) == 0 for g in grads)


def test_nan_loss_is_a_hard_error():
    net = Mlp([1, 1])
    loss = net(torch.tensor([float('nan')], dtype=DTYPE)).sum()
    with pytest.raises(NonFiniteError):
        backward(loss, list(net.parameters()))
    with pytest.raises(NonFiniteError):
        check_finite(torch.tensor([1.0, float('inf')]), 'テスト')


def test_mlp_gradients_match_central_differences():
    rng = np.random.default_rng(1)
    for seed in range(GRAD_CONFIGS):
        widths = [int(w) for w in rng.integers(1, 5, size=int(rng.integers(2, 4)))]
        with seeded(seed):
            net = Mlp(widths)
            x = torch.randn(3, widths[0], dtype=DTYPE)
        assert gradients_match([net], [x], lambda ps, x: functional_call(net, ps[0], (x,)))


def test_gru_gradients_match_central_differences():
    rng = np.random.default_rng(2)
    for seed in range(GRAD_CONFIGS):
        n_in, H = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        with seeded(seed):
            cell = GruCell(n_in, H)
            x = torch.randn(2, n_in, dtype=DTYPE)
            h = torch.randn(2, H, dtype=DTYPE)
        assert gradients_match([cell], [x, h], lambda ps, x, h: functional_call(cell, ps[0], (x, h)))


def test_qmix_end_to_end_gradients():
    """エージェントネット2体分のQ値から混合ネットワークまで通した勾配"""
    rng = np.random.default_rng(3)
    B, m, n, levels = 2, 2, 2, 3
    for seed in range(GRAD_CONFIGS):
        with seeded(seed):
            net = QmixAgentNet(4, n, hidden=3, n_levels=levels)
            mixer = QmixMixer(m, 3, embed=3, hypernet_embed=3)
            x = torch.randn(B, m, 4, dtype=DTYPE)
            state = torch.randn(B, 3, dtype=DTYPE)
        actions = torch.as_tensor(rng.integers(levels, size=(B, m, n)), dtype=torch.int64)

        def forward(ps, x, state):
            qs = []
            for i in range(m):
                h0 = torch.zeros(B, 3, dtype=DTYPE)
                q, _ = functional_call(net, ps[0], (x[:, i], h0))
                qs.append(q.gather(-1, actions[:, i].unsqueeze(-1)).squeeze(-1).sum(-1))
            return functional_call(mixer, ps[1], (torch.stack(qs, dim=1), state))

        assert gradients_match([net, mixer], [x, state], forward)


class LossOf(torch.nn.Module):
    """エージェントの損失関数を forward として呼ぶ入れ物（functional_call 用）"""

    def __init__(self, agent, fn):
        super().__init__()
        self.agent = agent
        self.fn = fn

    def forward(self):
        return self.fn(self.agent)


def loss_gradients_match(agent, prefixes, fn):
    """prefixes で始まるパラメータについて fn(agent) の勾配を中心差分と比べる"""
    wrapper = LossOf(agent, fn)
    params = dict(wrapper.named_parameters())
    names = [name for name in params if name.startswith(prefixes)]
    flat = tuple(params[name].detach().clone().requires_grad_(True) for name in names)

    def loss(*values):
        return functional_call(wrapper, dict(zip(names, values)), ())

    return gradcheck(loss, flat, eps=1e-6, atol=1e-8, rtol=1e-4)


def random_sac_case(seed, rng):
    n, levels = int(rng.integers(1, 3)), int(rng.integers(2, 4))
    input_dim, state_dim, hidden, B = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 4)), 3
    agent = SacAgent(n, input_dim, state_dim, hidden=hidden, n_levels=levels, seed=seed)
    with torch.no_grad():
        agent.log_alpha.fill_(float(rng.normal(scale=0.5)))
        # ターゲットをオンラインのクリティックからずらしておく
        for p in list(agent.target1.parameters()) + list(agent.target2.parameters()):
            p.add_(torch.as_tensor(rng.normal(scale=0.1, size=tuple(p.shape)), dtype=DTYPE))

    def t(*shape):
        return torch.as_tensor(rng.normal(size=shape), dtype=DTYPE)

    batch = SacBatch(
        x=t(B, input_dim), h=t(B, hidden),
        action=torch.as_tensor(rng.integers(levels, size=(B, n)), dtype=torch.int64),
        reward=t(B), next_x=t(B, input_dim), next_h=t(B, hidden),
        state=t(B, state_dim), next_state=t(B, state_dim),
        done=torch.as_tensor(rng.integers(2, size=B), dtype=DTYPE),
    )
    return agent, batch


def test_sac_losses_match_central_differences():
    """クリティック・方策・温度の3つの損失それぞれについて勾配を確かめる"""
    rng = np.random.default_rng(4)
    for seed in range(GRAD_CONFIGS):
        agent, batch = random_sac_case(seed, rng)
        y = sac_targets(agent, batch)
        _, entropy = sac_actor_loss(agent, batch)
        assert loss_gradients_match(agent, ('agent.critic1.', 'agent.critic2.'),
                                    lambda a: sac_critic_loss(a, batch, y))
        assert loss_gradients_match(agent, ('agent.gru.', 'agent.policy_head.'),
                                    lambda a: sac_actor_loss(a, batch)[0])
        assert loss_gradients_match(agent, ('agent.log_alpha',), lambda a: sac_alpha_loss(a, entropy))


# --- Adam ---

def test_zero_gradient_leaves_params_unchanged():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=DTYPE))
    opt = make_adam([p], 1e-3)
    adam_update([p], [torch.zeros(2, dtype=DTYPE)], 1e-3, opt)
    assert p.tolist() == [1.0, -2.0]


def test_first_adam_step_moves_by_lr():
    p = torch.nn.Parameter(torch.tensor([1.0, 1.0], dtype=DTYPE))
    opt = make_adam([p], 0.01)
    adam_update([p], [torch.tensor([3.0, -0.5], dtype=DTYPE)], 0.01, opt)
    np.testing.assert_allclose(p.detach().numpy(), [0.99, 1.01], atol=1e-8)


def test_constant_gradient_descends():
    p = torch.nn.Parameter(torch.tensor([0.0], dtype=DTYPE))
    opt = make_adam([p], 0.05)
    for _ in range(50):
        adam_update([p], [torch.tensor([2.0], dtype=DTYPE)], 0.05, opt)
    assert p.item() < -1.0


def test_adam_rejects_mismatched_gradient():
    p = torch.nn.Parameter(torch.zeros(2, dtype=DTYPE))
    with pytest.raises(ContractViolation):
        adam_update([p], [torch.zeros(3, dtype=DTYPE)], 1e-3, make_adam([p], 1e-3))


# --- チェックポイント ---

def test_checkpoint_round_trip(tmp_path):
    net = Mlp([2, 3, 1])
    path = save_checkpoint(tmp_path / 'sub' / 'net.pt', {'net': net.state_dict(), 'episode': 4})
    payload = load_checkpoint(path)
    other = Mlp([2, 3, 1])
    other.load_state_dict(payload['net'])
    for a, b in zip(net.parameters(), other.parameters()):
        assert torch.equal(a, b)
    assert payload['episode'] == 4


def test_checkpoint_header_is_checked(tmp_path):
    torch.save({'weights': 1}, tmp_path / 'foreign.pt')
    with pytest.raises(ContractViolation):
        load_checkpoint(tmp_path / 'foreign.pt')
    torch.save({'format': 'lbsim-checkpoint', 'version': 99, 'payload': {}}, tmp_path / 'future.pt')
    with pytest.raises(ContractViolation):
        load_checkpoint(tmp_path / 'future.pt')
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / 'missing.pt')
