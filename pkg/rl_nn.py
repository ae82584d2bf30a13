"""
エージェント用の小さなニューラルネット部品（torch、64ビット浮動小数点）

全結合ネット、GRUセル、勾配計算、Adam、チェックポイントの保存・読み込み。
"""
import contextlib
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import torch
import torch.nn as nn

from sim_core import ContractViolation

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_FORMAT = 'lbsim-checkpoint'
CHECKPOINT_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NonFiniteError(ContractViolation):
    """テンソルに NaN / Inf が現れた"""


def check_finite(tensor: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f'{what} に NaN または Inf が含まれています')
    return tensor


@contextlib.contextmanager
def seeded(seed: int) -> Iterator[None]:
    """torch のグローバル乱数を汚さずに seed で初期化する"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class Mlp(nn.Module):
    """
    全結合ネット（隠れ層は ReLU、出力層は線形）

    Args:
        widths: [入力, 隠れ層..., 出力] の幅
    """

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ContractViolation(f'層の幅が不正です: {list(widths)}')
        self.widths = list(widths)
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:])
        )

    @property
    def in_features(self) -> int:
        return self.widths[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class GruCell(nn.Module):
    """
    GRUセル

    z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
    h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h), h' = (1 − z) ⊙ h + z ⊙ h̃
    """

    def __init__(self, input_size: int, hidden_size: int = 64):
        super().__init__()
        if input_size < 1 or hidden_size < 1:
            raise ContractViolation('GRU の入力幅・隠れ幅は1以上にしてください')
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w_x = nn.Linear(input_size, 3 * hidden_size, dtype=DTYPE)
        self.u_zr = nn.Linear(hidden_size, 2 * hidden_size, bias=False, dtype=DTYPE)
        self.u_h = nn.Linear(hidden_size, hidden_size, bias=False, dtype=DTYPE)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        H = self.hidden_size
        gx = self.w_x(x)
        gh = self.u_zr(h)
        z = torch.sigmoid(gx[..., :H] + gh[..., :H])
        r = torch.sigmoid(gx[..., H:2 * H] + gh[..., H:])
        h_tilde = torch.tanh(gx[..., 2 * H:] + self.u_h(r * h))
        return (1.0 - z) * h + z * h_tilde

    def initial_state(self, batch: Optional[int] = None) -> torch.Tensor:
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return torch.zeros(shape, dtype=DTYPE)


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=DTYPE)


def mlp_forward(params: Mlp, x) -> torch.Tensor:
    """入力幅を検査して Mlp を適用する"""
    x = _as_tensor(x)
    if x.shape[-1] != params.in_features:
        raise ContractViolation(f'入力幅 {x.shape[-1]} がネットの入力幅 {params.in_features} と一致しません')
    return params(x)


def gru_step(params: GruCell, x, h) -> torch.Tensor:
    """形状を検査して GRU を1ステップ進める"""
    x = _as_tensor(x)
    h = _as_tensor(h)
    if x.shape[-1] != params.input_size or h.shape[-1] != params.hidden_size:
        raise ContractViolation(
            f'GRU の形状が不正です（x: {tuple(x.shape)}, h: {tuple(h.shape)}）'
        )
    return params(x, h)


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    """
    loss の各パラメータに対する勾配

    Args:
        loss: スカラーの損失
        params: 勾配を求めるパラメータ

    Returns:
        params と同じ形の勾配（計算グラフに現れないパラメータは0）

    Raises:
        NonFiniteError: 損失または勾配に NaN / Inf がある場合
    """
    params = list(params)
    check_finite(loss.detach(), '損失')
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        out.append(check_finite(g, '勾配'))
    return out


def make_adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_update(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
                lr: float, moment_state: torch.optim.Adam) -> None:
    """
    Adam で1ステップ更新する

    moment_state は params を管理する torch.optim.Adam。lr はその都度上書きする。
    """
    for group in moment_state.param_groups:
        group['lr'] = lr
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ContractViolation(f'パラメータと勾配の形状が一致しません: {tuple(p.shape)} と {tuple(g.shape)}')
        p.grad = g.detach().clone()
    moment_state.step()


def optimize(loss: torch.Tensor, params: Sequence[torch.Tensor], optimizer: torch.optim.Adam,
             lr: Optional[float] = None) -> float:
    """損失から勾配を求めて1ステップ更新し、損失値を返す"""
    params = list(params)
    grads = backward(loss, params)
    adam_update(params, grads, lr if lr is not None else optimizer.param_groups[0]['lr'], optimizer)
    return float(loss.detach())


def save_checkpoint(path: Union[str, Path], payload: Dict) -> Path:
    """
    バージョン付きヘッダーを添えてチェックポイントを保存する

    payload には state_dict やリプレイバッファなど任意の pickle 可能なものを入れる。
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({'format': CHECKPOINT_FORMAT, 'version': CHECKPOINT_VERSION, 'payload': payload}, path)
    logger.info('チェックポイントを保存しました: %s', path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict:
    """
    チェックポイントを読み込む

    Raises:
        FileNotFoundError: ファイルがない場合
        ContractViolation: 形式・バージョンが合わない場合
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'チェックポイントが見つかりません: {path}')
    blob = torch.load(path, map_location='cpu', weights_only=False)
    if not isinstance(blob, dict) or blob.get('format') != CHECKPOINT_FORMAT:
        raise ContractViolation(f'チェックポイントの形式が不正です: {path}')
    if blob.get('version') != CHECKPOINT_VERSION:
        raise ContractViolation(
            f"チェックポイントのバージョン {blob.get('version')} は未対応です（対応: {CHECKPOINT_VERSION}）"
        )
    return blob['payload']
