"""共享夹具与数值工具"""
import numpy as np
import pytest

import numkit as nk
from config import AlignConfig
from worldkit import generate, make_behavior, make_env

FD_EPS = 1e-6
FD_RTOL = 1e-4
FD_ATOL = 1e-7


def numeric_grad(fn, params: nk.ParamStore, name: str, eps: float = FD_EPS) -> np.ndarray:
    """对参数 name 的中心差分梯度"""
    tensor = params[name]
    original = tensor.value.copy()
    out = np.zeros_like(original)
    for idx in np.ndindex(original.shape):
        plus = original.copy()
        plus[idx] += eps
        tensor.value = plus
        f_plus = fn().item()
        minus = original.copy()
        minus[idx] -= eps
        tensor.value = minus
        f_minus = fn().item()
        out[idx] = (f_plus - f_minus) / (2 * eps)
    tensor.value = original
    return out


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray):
    assert np.allclose(analytic, numeric, rtol=FD_RTOL, atol=FD_ATOL), \
        f"最大误差 {np.max(np.abs(analytic - numeric)):.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def chain_dataset():
    env = make_env('chain-5', epsilon=0.3)
    return generate(env, make_behavior(env, 0.3), episodes=60, seed=7, workers=2)


@pytest.fixture(scope='session')
def pointmass_dataset():
    env = make_env('pointmass')
    return generate(env, make_behavior(env, 0.2), episodes=40, seed=3, workers=2)


@pytest.fixture
def tiny_config():
    """几步即可跑完的训练配置"""
    return AlignConfig.from_dict({
        'sigma_e': 0.5,
        'lambda_e': 1.0,
        'delta_rtg': 0.5,
        'context_len': 4,
        'batch_size': 4,
        'epochs': 2,
        'steps_per_epoch': 3,
        'seed': 11,
        'model': {'embed_dim': 8, 'n_blocks': 1, 'n_heads': 2, 'conv_window': 3, 'max_timestep': 32},
        'critic': {'hidden_width': 8, 'hidden_layers': 2, 'pretrain_steps': 5, 'pretrain_batch': 8},
        'data': {'env_id': 'chain-5', 'episodes': 20, 'epsilon': 0.3},
        'eval': {'n_targets': 3, 'rollouts': 2},
    })
