from __future__ import annotations

import itertools

import numpy as np
import pytest

from rank1_lab import tasks as T
from rank1_lab.errors import ConfigError, DomainError
from oracles import pass_at_k_brute


def _values(nums):
    """Brute-force reachable set: every permutation, every binary bracketing."""
    out = set()

    def trees(seq):
        if len(seq) == 1:
            yield seq[0]
            return
        for cut in range(1, len(seq)):
            for a in trees(seq[:cut]):
                for b in trees(seq[cut:]):
                    yield a + b
                    yield a - b
                    yield a * b
                    if b != 0 and a % b == 0:
                        yield a // b

    for perm in itertools.permutations(nums):
        out.update(trees(list(perm)))
    return out


def _inst(nums, target):
    return T.CountdownInstance(tuple(nums), target)


def test_codec_roundtrip():
    s = "3*(5+2)"
    assert T.decode(T.encode(s)) == s
    assert T.decode(T.encode("12") + [T.EOS] + T.encode("9")) == "12"
    with pytest.raises(ValueError):
        T.encode("x")
    p = T.encode_prompt(_inst([2, 3, 5], 17))
    assert p[0] == T.BOS and T.decode(p[1:]) == "2,3,5|17="


def test_solver_examples():
    assert T.solve([2, 3], 6) is not None
    expr = T.solve([3, 3, 8], 72)
    assert expr is not None and T.verify(_inst([3, 3, 8], 72), T.encode(expr))


@pytest.mark.parametrize("nums", [(2, 3), (3, 3, 8), (1, 7, 12), (4, 6, 9), (5, 5, 2)])
def test_reachable_matches_brute_force(nums):
    got = T.reachable(nums)
    assert set(got) == _values(list(nums))
    for v, e in got.items():
        assert T.verify(_inst(nums, v), T.encode(e))


def test_dataset_deterministic_and_valid():
    a = T.generate_dataset(1, 40, (2, 3))
    assert a == T.generate_dataset(1, 40, (2, 3))
    assert a != T.generate_dataset(2, 40, (2, 3))
    for inst in a:
        assert 2 <= len(inst.numbers) <= 3 and 1 <= inst.target <= 100
        assert T.verify(inst, T.encode(T.solve(inst.numbers, inst.target)))
    assert [x.id for x in a] == list(range(40))
    with pytest.raises(ConfigError):
        T.generate_dataset(0, 3, k_range=(3, 2))


def test_verify_cases():
    inst = _inst([2, 3, 5], 17)
    assert T.verify(inst, T.encode("3*5+2"))
    assert T.verify(inst, T.encode("(3*5)+2") + [T.EOS, 5, 6])
    assert not T.verify(inst, T.encode("(2*5)+(3+4)"))
    assert not T.verify(inst, T.encode("3*5+2+0"))
    assert not T.verify(inst, [])
    assert not T.verify(inst, T.encode("3*5+"))
    assert not T.verify(inst, T.encode("2+3*5)"))
    assert not T.verify(inst, [T.PAD, 5])
    assert not T.verify(_inst([7, 2], 3), T.encode("7/2"))
    assert T.verify(_inst([8, 2], 4), T.encode("8/2"))
    assert not T.verify(_inst([8, 0], 8), T.encode("8/0"))
    assert not T.verify(_inst([2, 3], 5), T.encode("02+3"))


def test_precedence_and_postfix():
    assert T.evaluate(T.encode("2+3*5"))[0] == 17
    assert T.evaluate(T.encode("(2+3)*5"))[0] == 25
    assert T.evaluate(T.encode("10-4-3"))[0] == 3
    assert T.evaluate(T.encode("3 5 * 2 +"), "postfix")[0] == 17
    assert T.verify(_inst([2, 3, 5], 17), T.encode("3 5 * 2 +"), "postfix")
    assert not T.verify(_inst([2, 3, 5], 17), T.encode("3 5 *"), "postfix")


def test_length_penalty_branches():
    cfg = T.RewardConfig(L_max=16, L_cache=4, enable_overlong=True)
    assert T.length_penalty(12, cfg) == 0.0
    assert T.length_penalty(14, cfg) == -0.5
    assert T.length_penalty(16, cfg) == -1.0
    assert T.length_penalty(17, cfg) == -1.0
    big = T.RewardConfig(L_max=40, L_cache=20)
    assert T.length_penalty(30, big) == -0.5
    assert T.length_penalty(20, big) == 0.0
    assert T.length_penalty(41, big) == -1.0
    with pytest.raises(ConfigError):
        T.RewardConfig(L_max=4, L_cache=4)


def test_reward():
    inst = _inst([2, 3, 5], 17)
    cfg = T.RewardConfig(L_max=16, L_cache=4, enable_overlong=True)
    ok = T.encode("3*5+2")
    assert T.reward(inst, ok + [T.EOS] + [T.PAD] * (12 - len(ok) - 1), cfg) == 1.0
    long = ok + [T.EOS] + [T.PAD] * 20
    assert T.reward(inst, long, cfg) == 0.0
    prev = None
    for n in range(len(ok) + 1, 24):
        r = T.reward(inst, ok + [T.EOS] * (n - len(ok)), cfg)
        assert prev is None or r <= prev
        prev = r
    assert T.reward(inst, T.encode("2+3+5"), T.RewardConfig()) == 0.0
    assert T.reward(inst, T.encode("2+3+5"), T.RewardConfig(format_bonus=0.1)) == 0.1


def test_split():
    ds = T.generate_dataset(0, 10, (2, 2))
    tr, te = T.split(ds, 3)
    assert [x.id for x in tr] == list(range(7)) and [x.id for x in te] == [7, 8, 9]
    tr, te = T.split(ds, 0)
    assert len(tr) == 10 and te == []
    with pytest.raises(ConfigError):
        T.split(ds, 10)


def test_pass_at_k():
    assert T.pass_at_k(5, 5, 3) == 1.0
    assert T.pass_at_k(5, 0, 3) == 0.0
    assert T.pass_at_k(5, 2, 2) == pytest.approx(0.7, abs=1e-15)
    assert pass_at_k_brute(5, 2, 2) == pytest.approx(0.7)
    with pytest.raises(DomainError):
        T.pass_at_k(3, 4, 1)
    with pytest.raises(DomainError):
        T.pass_at_k(3, 1, 0)


def test_random_expression_well_formed():
    rng = np.random.default_rng(0)
    for _ in range(200):
        nums = tuple(int(x) for x in rng.integers(1, 21, size=int(rng.integers(2, 4))))
        e = T.random_expression(nums, rng)
        assert T.well_formed(_inst(nums, 0), T.encode(e))


def test_jsonl_roundtrip(tmp_path):
    ds = T.generate_dataset(3, 5)
    h1 = T.write_jsonl(ds, tmp_path / "a.jsonl")
    h2 = T.write_jsonl(T.read_jsonl(tmp_path / "a.jsonl"), tmp_path / "b.jsonl")
    assert h1 == h2 and T.read_jsonl(tmp_path / "b.jsonl") == ds
