"""Fisher information and Cramér-Rao bounds for heteroscedastic EIV affine registration.

The parameter vector is ``theta_TC = [vec_rows(A); s; x1_1; ...; x1_K]`` and,
with a feature, ``theta_FTC = [x2F; theta_TC]`` (see ``ParameterLayout``).

The information matrix has the block form::

    J(theta_TC) = [[S_HH,    S_HG  ],
                   [S_HG^T,  S_FFGG]]

with ``S_FFGG`` block diagonal (one d x d block per control point). All
inversions go through the Schur complement of that block diagonal part, so
cost grows linearly in K.
"""

# ruff: noqa: N806, N803
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy import linalg

from regbound._linalg import spd_inverse, symmetrize
from regbound.errors import InvalidScenario, SingularFim
from regbound.regmodel import ParameterLayout, RegistrationScenario, validate

__all__ = [
    "FimBlocks",
    "FeatureFimBlocks",
    "CrlbReport",
    "design_rows",
    "build_fim_tc",
    "build_fim_ftc",
    "assemble_fim_tc",
    "assemble_fim_ftc",
    "crlb_tt",
    "crlb_ff_general",
    "crlb_tc_dense",
    "crlb_ftc_dense",
]


def design_rows(X1):
    """Stack of ``H_k = [I_d kron x_k^T, I_d]`` for the columns of ``X1``.

    Accepts ``(d, K)`` or batched ``(..., d, K)`` and returns ``(..., K, d, d*d + d)``.
    """
    X1 = np.asarray(X1, dtype=float)
    d, K = X1.shape[-2:]
    lead = X1.shape[:-2]
    H = np.zeros(lead + (K, d, d * d + d))
    xt = np.swapaxes(X1, -1, -2)  # (..., K, d)
    for i in range(d):
        H[..., i, i * d:(i + 1) * d] = xt
        H[..., i, d * d + i] = 1.0
    return H


@dataclass(frozen=True)
class FimBlocks:
    """Blocks of ``J(theta_TC)``.

    ``S_FFGG_blocks[k]`` is the k-th diagonal block ``Lambda^T Omega_k^-1 Lambda``;
    ``S_HG`` has shape ``(d^2 + d, d K)``.
    """

    S_HH: NDArray
    S_HG: NDArray
    S_FFGG_blocks: NDArray
    layout: ParameterLayout

    @property
    def S_FFGG(self) -> NDArray:
        return linalg.block_diag(*self.S_FFGG_blocks)

    @property
    def S_HG_blocks(self) -> NDArray:
        """``S_HG`` split per control point, shape ``(K, d^2 + d, d)``."""
        p = self.S_HH.shape[0]
        K, d = self.S_FFGG_blocks.shape[:2]
        return self.S_HG.reshape(p, K, d).transpose(1, 0, 2)


@dataclass(frozen=True)
class FeatureFimBlocks:
    """Feature contribution to ``J(theta_FTC)``.

    ``A_block`` is ``A^-T Omega_1F^-1 A^-1``; ``D_F = A^-1`` and
    ``D_T = -A^-1 [I_d kron x1F^T, I_d]`` (row-stacked vec(A)).
    """

    D_F: NDArray
    D_T: NDArray
    D_TT: NDArray
    D_FT: NDArray
    A_block: NDArray


@dataclass(frozen=True)
class CrlbReport:
    """Inverted information blocks and per-parameter square-root bounds."""

    C_TT: NDArray
    C_TC: NDArray
    C_CC_blocks: NDArray
    layout: ParameterLayout
    schur: NDArray = field(repr=False)
    condition: dict = field(default_factory=dict)
    C_FF: Optional[NDArray] = None

    def sqrt_crlb(self) -> dict:
        """Map parameter name -> sqrt of its CRLB (transform, CP and, if present, feature)."""
        out = {}
        d = self.layout.d
        if self.C_FF is not None:
            for i in range(d):
                out[f"x2F_{i + 1}"] = float(np.sqrt(self.C_FF[i, i]))
        for name, v in zip(self.layout.transform_names, np.diag(self.C_TT)):
            out[name] = float(np.sqrt(v))
        for k, blk in enumerate(self.C_CC_blocks):
            for i in range(d):
                out[f"x1_{k + 1}_{i + 1}"] = float(np.sqrt(blk[i, i]))
        return out


def _check(scn):
    problems = validate(scn)
    if problems:
        raise InvalidScenario(problems)


def build_fim_tc(scn: RegistrationScenario) -> FimBlocks:
    """Assemble ``S_HH``, ``S_HG`` and the diagonal blocks of ``S_FF + S_GG``."""
    _check(scn)
    cov = scn.general_cov
    A = scn.transform.A
    d, K = scn.d, scn.K
    W1 = np.linalg.inv(cov.omega1)
    W2 = np.linalg.inv(cov.omega2)
    H = design_rows(scn.cps.X1)  # (K, d, p)
    HtW = np.swapaxes(H, -1, -2) @ W2  # (K, p, d)
    # ordered sum over k = 1..K
    S_HH = np.zeros((H.shape[-1],) * 2)
    for k in range(K):
        S_HH += HtW[k] @ H[k]
    hg = HtW @ A  # (K, p, d): H_k^T W2_k A
    S_HG = hg.transpose(1, 0, 2).reshape(H.shape[-1], d * K)
    blocks = W1 + np.swapaxes(A, 0, 1)[None] @ W2 @ A[None]
    return FimBlocks(
        S_HH=symmetrize(S_HH),
        S_HG=S_HG,
        S_FFGG_blocks=symmetrize(blocks),
        layout=ParameterLayout(d, K),
    )


def assemble_fim_tc(blocks: FimBlocks) -> NDArray:
    """Dense ``J(theta_TC)``."""
    return np.block([[blocks.S_HH, blocks.S_HG], [blocks.S_HG.T, blocks.S_FFGG]])


def _schur(blocks: FimBlocks):
    """``S_HH - S_HG (S_FF + S_GG)^-1 S_HG^T`` plus per-block solves ``L_k^-1 B_k^T``."""
    B = blocks.S_HG_blocks  # (K, p, d)
    Linv = np.linalg.inv(blocks.S_FFGG_blocks)
    LinvBt = Linv @ np.swapaxes(B, -1, -2)  # (K, d, p)
    S = blocks.S_HH.copy()
    for k in range(B.shape[0]):
        S -= B[k] @ LinvBt[k]
    return symmetrize(S), Linv, LinvBt


def crlb_tt(blocks: FimBlocks) -> CrlbReport:
    """Invert ``J(theta_TC)`` blockwise.

    ``C_TT`` is the inverse Schur complement; ``C_TC`` and the diagonal blocks of
    ``C_CC`` follow from the block inversion formula.

    Raises
    ------
    SingularFim
        If the Schur complement's scaled condition number exceeds 1e12.
    """
    for k, blk in enumerate(blocks.S_FFGG_blocks):
        if not np.all(np.linalg.eigvalsh(blk) > 0):
            raise SingularFim(f"S_FF + S_GG block {k + 1} is not positive definite")
    schur, Linv, LinvBt = _schur(blocks)
    C_TT, cond = spd_inverse(schur, error=SingularFim, what="Schur complement of J(theta_TC)")
    # C_TC block k: -C_TT B_k L_k^-1 ; C_CC block k: L_k^-1 + L_k^-1 B_k^T C_TT B_k L_k^-1
    CtcK = -np.swapaxes(LinvBt @ C_TT, -1, -2)  # (K, p, d)
    K, p, d = CtcK.shape
    C_TC = CtcK.transpose(1, 0, 2).reshape(p, d * K)
    C_CC = Linv + LinvBt @ C_TT @ np.swapaxes(LinvBt, -1, -2)
    return CrlbReport(
        C_TT=C_TT,
        C_TC=C_TC,
        C_CC_blocks=symmetrize(C_CC),
        layout=blocks.layout,
        schur=schur,
        condition={"schur": cond},
    )


def feature_blocks(A, x1F, omega1F) -> FeatureFimBlocks:
    A = np.asarray(A, dtype=float)
    Ainv = np.linalg.inv(A)
    W = np.linalg.inv(omega1F)
    D_F = Ainv
    D_T = -Ainv @ design_rows(np.asarray(x1F, dtype=float)[:, None])[0]
    return FeatureFimBlocks(
        D_F=D_F,
        D_T=D_T,
        D_TT=symmetrize(D_T.T @ W @ D_T),
        D_FT=D_F.T @ W @ D_T,
        A_block=symmetrize(Ainv.T @ W @ Ainv),
    )


def build_fim_ftc(scn: RegistrationScenario):
    """Blocks of ``J(theta_FTC)``: returns ``(FimBlocks, FeatureFimBlocks)``."""
    if scn.feature is None:
        raise InvalidScenario(["scenario has no feature"])
    blocks = build_fim_tc(scn)
    fb = feature_blocks(scn.transform.A, scn.feature.x1, scn.feature.omega1)
    blocks = FimBlocks(
        blocks.S_HH, blocks.S_HG, blocks.S_FFGG_blocks, ParameterLayout(scn.d, scn.K, True)
    )
    return blocks, fb


def assemble_fim_ftc(blocks: FimBlocks, fb: FeatureFimBlocks) -> NDArray:
    """Dense ``J(theta_FTC)`` in the order ``[x2F; theta_T; theta_C]``."""
    d = fb.D_F.shape[0]
    nC = blocks.S_HG.shape[1]
    Z = np.zeros((d, nC))
    return np.block(
        [
            [fb.A_block, fb.D_FT, Z],
            [fb.D_FT.T, fb.D_TT + blocks.S_HH, blocks.S_HG],
            [Z.T, blocks.S_HG.T, blocks.S_FFGG],
        ]
    )


def crlb_ff_general(scn: RegistrationScenario) -> CrlbReport:
    """Bound on the registered feature position ``x2F`` for any covariance model.

    ``C_FF = (A^-T Omega_1F^-1 A^-1 - D_FT (D_TT + C_TT^-1)^-1 D_FT^T)^-1``.
    The returned report also carries ``C_TT``, ``C_TC`` and ``C_CC``.
    """
    blocks, fb = build_fim_ftc(scn)
    rep = crlb_tt(blocks)
    inner, cond_inner = spd_inverse(fb.D_TT + rep.schur, error=SingularFim, what="D_TT + C_TT^-1")
    info = fb.A_block - fb.D_FT @ inner @ fb.D_FT.T
    C_FF, cond_ff = spd_inverse(info, error=SingularFim, what="feature information")
    condition = dict(rep.condition, inner=cond_inner, feature=cond_ff)
    return CrlbReport(
        C_TT=rep.C_TT,
        C_TC=rep.C_TC,
        C_CC_blocks=rep.C_CC_blocks,
        layout=blocks.layout,
        schur=rep.schur,
        condition=condition,
        C_FF=C_FF,
    )


def _dense_inverse(J):
    inv, _ = spd_inverse(J, cond_limit=np.inf, error=SingularFim, what="J")
    return inv


def crlb_tc_dense(scn: RegistrationScenario) -> NDArray:
    """``J(theta_TC)^-1`` by one dense factorisation; a cross-check for ``crlb_tt``."""
    return _dense_inverse(assemble_fim_tc(build_fim_tc(scn)))


def crlb_ftc_dense(scn: RegistrationScenario) -> NDArray:
    """``J(theta_FTC)^-1`` by one dense factorisation."""
    return _dense_inverse(assemble_fim_ftc(*build_fim_ftc(scn)))
