"""Share-conversion and activation circuits, plus their plain-integer oracles.

These are the nonlinear pieces the protocol evaluates under garbling: moving
between additive mod-p shares and two's-complement words (A2G / G2A), ReLU on
field-form values, the normalized-attention activation (ReLU, scaled sum,
restoring division), the ReLU-only variant that drops the divider, and the
bitwidth narrowing/widening used by the reduced-precision option.

Conventions
  * Field form: values in [0, p) as unsigned words of wp = bitlen(p) bits;
    the centered lift maps v >= ceil(p/2) to v - p.
  * The garbler (server) feeds its own shares and fresh output masks; the
    evaluator (client) feeds its shares.
  * Every builder has a pure-integer oracle next to it.  Tests drive circuit
    and oracle from the same inputs and require bit equality; the oracles are
    written as independent arithmetic (numpy, greedy loops), not by reading
    the gate list back.

Cost notes that shaped the constructions (ANDs; XORs are free to garble):
ripple add of L bits costs L-1 (L with carry-out).  Conditional +/- of the
*constant* p is one adder, because masking a constant word by a flag is just
wiring flag/0 into the adder.  The divider keeps the remainder at dividend
width and folds the trial compare into the conditional subtract's borrow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .gc.circuit import CONST0, Builder, Circuit

VARIANTS = ("softmax_sim", "relu_only")


@dataclass(frozen=True)
class ActivationSpec:
    n: int
    w: int
    f: int
    variant: str
    act_w: int | None = None
    act_f: int | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError("activation needs n >= 1 elements")
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        if not 0 < self.f < self.w:
            raise ParameterError("need 0 < f < w")
        if (self.act_w is None) != (self.act_f is None):
            raise ParameterError("act_w and act_f come together")
        if self.act_w is not None:
            if not (self.act_f <= self.f and self.act_w <= self.w):
                raise ParameterError("reduced widths cannot exceed full widths")
            if not 0 < self.act_f < self.act_w:
                raise ParameterError("need 0 < act_f < act_w")


def field_width(p: int) -> int:
    return p.bit_length()


# ----------------------------------------------------------------------------
# sub-builders (compose several into one circuit)


def _masked_const(b: Builder, flag: int, value: int, width: int) -> list[int]:
    """flag ? value : 0 as a word -- free: each bit is `flag` or const 0."""
    return [flag if (value >> i) & 1 else CONST0 for i in range(width)]


def _a2g(b: Builder, p: int, g_share: list[int], e_share: list[int]) -> list[int]:
    """(g + e) mod p in field form; inputs are wp-bit field words."""
    wp = field_width(p)
    t = b.add(g_share, e_share, keep_carry=True)            # wp+1 bits
    ge = b.ge_unsigned(t, b.constant_word(p, wp + 1))
    red = b.sub(t, _masked_const(b, ge, p, wp + 1))
    return red[:wp]


def _g2a(b: Builder, p: int, y: list[int], s_y: list[int]) -> list[int]:
    """(y - s_y) mod p; wp-bit field words in and out."""
    wp = field_width(p)
    d = b.sub(y[:wp] + [CONST0] * (wp - len(y)), s_y, keep_borrow=True)
    no_borrow = d[-1]
    fix = _masked_const(b, b.inv(no_borrow), p, wp)
    return b.add(d[:wp], fix)


def _relu_field(b: Builder, p: int, v: list[int]) -> list[int]:
    """Centered-lift ReLU on a field-form word: keep v when its lift is
    nonnegative (v <= (p-1)/2), else zero.  Output stays in [0, p/2)."""
    wp = field_width(p)
    neg = b.ge_unsigned(v, b.constant_word((p + 1) // 2, wp))
    keep = b.inv(neg)
    return [b.and_(keep, x) for x in v]


def _divider(b: Builder, x: list[int], s: list[int], f: int,
             enable: int | None = None) -> list[int]:
    """Quotient bits f-1..0 of x / s by restoring division.

    Walks j = f-1 .. 0 comparing the remainder against s << j.  The remainder
    stays at dividend width: the trial subtraction's borrow is the compare,
    and a separate running OR over the bits of s shifted past the top detects
    the early steps where s << j cannot fit at all.  Saturates at 2^f - 1
    when x/s does not fit in f bits.  `enable` (if given) gates every
    quotient bit -- the caller uses it to force 0/0 to 0.
    """
    w = len(x)
    rem = list(x)
    q: list[int] = [CONST0] * f
    # suffix ORs of s: suf[i] = OR(s[i:]); suf[w-j] says s << j spills past w
    suf = list(s) + [CONST0]
    for i in reversed(range(len(s))):
        suf[i] = b.or_(s[i], suf[i + 1])
    for j in reversed(range(f)):
        shifted = ([CONST0] * j + list(s))[:w]
        spill = suf[w - j] if w - j < len(s) else CONST0
        d = b.sub(rem, shifted, keep_borrow=True)
        fit = b.and_(d[-1], b.inv(spill))
        if enable is not None:
            fit = b.and_(fit, enable)
        rem = b.mux(fit, d[:w], rem)
        q[j] = fit
    return q


def _narrow(b: Builder, x: list[int], f: int, act_w: int, act_f: int) -> list[int]:
    """Signed (w, f) -> (act_w, act_f): drop low fraction bits, saturate."""
    shifted = b.shift_right_arith(x, f - act_f)
    return b.saturate(shifted, act_w)


def _widen(b: Builder, y: list[int], w: int, f: int, act_f: int) -> list[int]:
    """Signed (act_w, act_f) -> (w, f): sign-extend, then shift in zero
    fraction bits; free (pure wiring)."""
    return b.shift_left(b.sign_extend(y, w), f - act_f)[:w]


# ----------------------------------------------------------------------------
# circuit factories


def build_a2g(p: int) -> Circuit:
    b = Builder()
    wp = field_width(p)
    g = b.garbler_word(wp)
    e = b.evaluator_word(wp)
    b.mark_output_word(_a2g(b, p, g, e))
    return b.freeze()


def build_g2a(p: int) -> Circuit:
    b = Builder()
    wp = field_width(p)
    y = b.evaluator_word(wp)
    s_y = b.garbler_word(wp)
    b.mark_output_word(_g2a(b, p, y, s_y))
    return b.freeze()


def build_relu(p: int) -> Circuit:
    b = Builder()
    wp = field_width(p)
    v = b.evaluator_word(wp)
    b.mark_output_word(_relu_field(b, p, v))
    return b.freeze()


def build_divider(w: int, f: int) -> Circuit:
    b = Builder()
    x = b.garbler_word(w)
    s = b.evaluator_word(w)
    b.mark_output_word(_divider(b, x, s, f))
    return b.freeze()


def build_width_switch(w: int, f: int, act_w: int, act_f: int) -> Circuit:
    """Outputs the narrowed word (act_w bits) then the widened round trip
    (w bits) for the same input."""
    ActivationSpec(1, w, f, "relu_only", act_w, act_f)  # validate pairings
    b = Builder()
    x = b.garbler_word(w)
    nar = _narrow(b, x, f, act_w, act_f)
    b.mark_output_word(nar)
    b.mark_output_word(_widen(b, nar, w, f, act_f))
    return b.freeze()


def build_activation(spec: ActivationSpec, p: int) -> Circuit:
    """The per-tensor activation: n share pairs in, n fresh client shares out.

    Garbler inputs: n server shares then n output masks (all wp bits).
    Evaluator inputs: n client shares.
    """
    if field_width(p) < spec.w:
        raise ParameterError("field prime narrower than the value width")
    b = Builder()
    wp = field_width(p)
    g_shares = [b.garbler_word(wp) for _ in range(spec.n)]
    masks = [b.garbler_word(wp) for _ in range(spec.n)]
    e_shares = [b.evaluator_word(wp) for _ in range(spec.n)]

    relus = []
    for g, e in zip(g_shares, e_shares):
        v = _a2g(b, p, g, e)
        relus.append(_relu_field(b, p, v)[:spec.w])

    if spec.variant == "relu_only":
        for r, m in zip(relus, masks):
            b.mark_output_word(_g2a(b, p, r, m))
        return b.freeze()

    # scaled sum: accumulate ReLU(x) >> f, which keeps the total inside w bits
    acc = b.shift_right_arith(relus[0] + [CONST0], spec.f)[:spec.w]
    for r in relus[1:]:
        acc = b.add(acc, b.shift_right_arith(r + [CONST0], spec.f)[:spec.w])
    nonzero = CONST0
    for bit in acc:
        nonzero = b.or_(nonzero, bit)

    for r, m in zip(relus, masks):
        q = _divider(b, r, acc, spec.f, enable=nonzero)
        b.mark_output_word(_g2a(b, p, q, m))
    return b.freeze()


def build_attention_activation(spec: ActivationSpec, p: int) -> Circuit:
    if spec.variant != "softmax_sim":
        raise ParameterError("attention activation wants variant=softmax_sim")
    return build_activation(spec, p)


def build_relu_activation(spec: ActivationSpec, p: int) -> Circuit:
    if spec.variant != "relu_only":
        raise ParameterError("relu activation wants variant=relu_only")
    return build_activation(spec, p)


# ----------------------------------------------------------------------------
# oracles (independent arithmetic routes for the same maps)


def relu_field_oracle(v, p: int):
    v = np.asarray(v, dtype=np.int64)
    return np.where(v <= (p - 1) // 2, v, 0)


def divider_oracle(x, s, f: int):
    """Greedy digit selection: set bit j of Q when (Q | 2^j) * s <= x.
    Equals floor(x/s) whenever that fits in f bits, else saturates; s = 0
    yields all-ones (the circuit's zero-sum gate is applied separately)."""
    x = np.asarray(x, dtype=np.int64)
    s = np.asarray(s, dtype=np.int64)
    q = np.zeros(np.broadcast(x, s).shape, dtype=np.int64)
    for j in reversed(range(f)):
        trial = q | (1 << j)
        q = np.where(trial * s <= x, trial, q)
    return q


def activation_oracle(spec: ActivationSpec, p: int, g_shares, e_shares, masks):
    """Plain-integer route: returns (client_out_shares, plain_values)."""
    g = np.asarray(g_shares, dtype=np.int64)
    e = np.asarray(e_shares, dtype=np.int64)
    m = np.asarray(masks, dtype=np.int64)
    v = (g + e) % p
    r = relu_field_oracle(v, p) & ((1 << spec.w) - 1)
    if spec.variant == "relu_only":
        y = r
    else:
        ssum = int((r >> spec.f).sum())
        if ssum == 0:
            y = np.zeros_like(r)
        else:
            y = divider_oracle(r, ssum, spec.f)
    return (y - m) % p, y


def width_switch_oracle(x, w: int, f: int, act_w: int, act_f: int):
    """(narrowed, widened) for signed inputs; mirrors shift-then-saturate and
    the sign-extended re-widening."""
    x = np.asarray(x, dtype=np.int64)
    nar = np.clip(x >> (f - act_f), -(1 << (act_w - 1)), (1 << (act_w - 1)) - 1)
    wide = (nar << (f - act_f)) & ((1 << w) - 1)
    wide = np.where(wide >= 1 << (w - 1), wide - (1 << w), wide)
    return nar, wide
