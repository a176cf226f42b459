"""Shadow-model membership inference: attack construction, execution and the
AUC / accuracy-over-privacy reporting.

The attack follows the classic shadow-model recipe: several classifiers are
trained on disjoint resplits of the validation set, their logits on member
and nonmember samples become the attack training data (partitioned by true
class), and per class the best of three model families is kept by held-out
AUC. The fitted per-class models are then pointed at the real target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax
from scipy.stats import rankdata

from .clf_training import ClfTrainConfig, ArraySource, predict_logits, train_classifier
from .datasets import LabeledDataset, ShadowSplit, make_shadow_split
from .nets import ClassifierConfig


class AttackError(Exception):
    pass


def auc(scores, labels) -> float:
    """Rank-statistic AUC: P(s_pos > s_neg) + 0.5 P(s_pos = s_neg).

    Ties get average ranks, so an all-tied score vector yields exactly 0.5.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AttackError("auc needs both positive and negative labels")
    ranks = rankdata(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def aop(accuracy: float, auc_mia: float) -> float:
    """Accuracy over privacy: accuracy / (2 * max(auc, 0.5))^2.

    The clamp at 0.5 keeps below-chance attacks from inflating the score;
    at chance-level AUC the metric reduces to plain accuracy.
    """
    if not 0.0 <= accuracy <= 1.0 or not 0.0 <= auc_mia <= 1.0:
        raise ValueError("accuracy and auc_mia must be in [0, 1]")
    return accuracy / (2.0 * max(auc_mia, 0.5)) ** 2


@dataclass
class ClassAttackModel:
    family: str  # "logistic" | "svc" | "forest" | "constant"
    model: object
    selection_auc: float

    def scores(self, features: np.ndarray) -> np.ndarray:
        if self.family == "constant":
            return np.full(len(features), 0.5)
        return self.model.predict_proba(features)[:, 1]


@dataclass
class AttackModelSet:
    per_class: dict  # class id -> ClassAttackModel

    def route(self, class_id: int) -> ClassAttackModel:
        return self.per_class[class_id]


@dataclass
class MiaReport:
    target_role: str
    pooled_auc: float
    macro_auc: float
    target_accuracy: float
    aop: float
    per_class_auc: dict

    def to_dict(self) -> dict:
        return {
            "target_role": self.target_role,
            "pooled_auc": self.pooled_auc,
            "macro_auc": self.macro_auc,
            "target_accuracy": self.target_accuracy,
            "aop": self.aop,
            "per_class_auc": {str(k): v for k, v in self.per_class_auc.items()},
        }


def train_shadow_models(val: LabeledDataset, n: int, clf_cfg: ClfTrainConfig,
                        net_cfg: ClassifierConfig, seed: int):
    """Train n shadows on disjoint 45/10/45 resplits of the validation set.

    Each shadow is trained on its member part with the holdout part for
    best-snapshot selection; the nonmember part is never seen in training.
    """
    shadows = []
    for i in range(n):
        split_seed = int(np.random.SeedSequence([seed, 6, i]).generate_state(1)[0])
        split = make_shadow_split(val, split_seed)
        trained = train_classifier(ArraySource(split.member_part), clf_cfg, net_cfg,
                                   split.holdout_part, seed=split_seed)
        shadows.append((trained, split))
    return shadows


def build_attack_dataset(shadows) -> dict:
    """class id -> (features [n, K] softmax probs, membership bits [n]) pooled
    over shadows. Probabilities rather than raw logits keep the feature scale
    comparable between the shadows and the eventual target."""
    feats, members, classes = [], [], []
    for trained, split in shadows:
        model = trained.build()
        for part, bit in ((split.member_part, 1), (split.nonmember_part, 0)):
            feats.append(softmax(predict_logits(model, part.images), axis=1))
            members.append(np.full(len(part), bit))
            classes.append(part.labels)
    feats = np.concatenate(feats)
    members = np.concatenate(members)
    classes = np.concatenate(classes)
    out = {}
    for c in np.unique(classes):
        mask = classes == c
        out[int(c)] = (feats[mask], members[mask])
    return out


def _fit_families(x_train, y_train, seed: int):
    from sklearn.ensemble import RandomForestClassifier
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler
    from sklearn.svm import SVC

    families = [
        ("logistic", make_pipeline(StandardScaler(),
                                   LogisticRegression(max_iter=1000, random_state=seed))),
        ("svc", make_pipeline(StandardScaler(),
                              SVC(kernel="rbf", probability=True, random_state=seed))),
        ("forest", RandomForestClassifier(n_estimators=100, random_state=seed)),
    ]
    for _, model in families:
        model.fit(x_train, y_train)
    return families


def train_attack_models(per_class: dict, selection_fraction: float = 0.2,
                        seed: int = 0) -> AttackModelSet:
    """Per class: fit the three families, keep the best held-out AUC.

    Ties go to logistic regression (the first family). Classes whose data
    carries a single membership label fall back to a constant scorer with
    AUC recorded as 0.5.
    """
    chosen = {}
    for c, (features, membership) in sorted(per_class.items()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7, int(c)]))
        if len(np.unique(membership)) < 2:
            chosen[c] = ClassAttackModel("constant", None, 0.5)
            continue
        n = len(features)
        perm = rng.permutation(n)
        n_sel = max(2, int(round(selection_fraction * n)))
        sel_idx, tr_idx = perm[:n_sel], perm[n_sel:]
        # selection portion must keep both labels; fall back to training data
        if len(np.unique(membership[sel_idx])) < 2 or len(np.unique(membership[tr_idx])) < 2:
            sel_idx = tr_idx = perm
        families = _fit_families(features[tr_idx], membership[tr_idx], seed=int(c) + seed)
        best = None
        for name, model in families:
            wrapped = ClassAttackModel(name, model, 0.0)
            sel_auc = auc(wrapped.scores(features[sel_idx]), membership[sel_idx])
            wrapped.selection_auc = sel_auc
            if best is None or sel_auc > best.selection_auc:
                best = wrapped
        chosen[c] = best
    return AttackModelSet(per_class=chosen)


def attack(target_model, members: LabeledDataset, nonmembers: LabeledDataset,
           attack_set: AttackModelSet, seed: int = 0) -> dict:
    """Run the fitted attack against a target; returns pooled/per-class AUCs.

    Member and nonmember counts are balanced by seeded subsampling to the
    smaller side before scoring.
    """
    if len(members) == 0 or len(nonmembers) == 0:
        raise AttackError("member and nonmember sets must be nonempty")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 8]))
    n = min(len(members), len(nonmembers))
    m_idx = rng.choice(len(members), size=n, replace=False)
    nm_idx = rng.choice(len(nonmembers), size=n, replace=False)

    feats = np.concatenate([
        softmax(predict_logits(target_model, members.images[m_idx]), axis=1),
        softmax(predict_logits(target_model, nonmembers.images[nm_idx]), axis=1),
    ])
    labels = np.concatenate([np.ones(n, dtype=int), np.zeros(n, dtype=int)])
    classes = np.concatenate([members.labels[m_idx], nonmembers.labels[nm_idx]])

    scores = np.zeros(len(feats))
    for c in np.unique(classes):
        mask = classes == c
        model = attack_set.per_class.get(int(c))
        scores[mask] = 0.5 if model is None else model.scores(feats[mask])

    per_class_auc = {}
    for c in np.unique(classes):
        mask = classes == c
        if len(np.unique(labels[mask])) == 2:
            per_class_auc[int(c)] = auc(scores[mask], labels[mask])
    pooled = auc(scores, labels)
    macro = float(np.mean(list(per_class_auc.values()))) if per_class_auc else 0.5
    return {"pooled_auc": pooled, "macro_auc": macro, "per_class_auc": per_class_auc}


def mia_report(target_role: str, target_accuracy: float, attack_result: dict) -> MiaReport:
    return MiaReport(
        target_role=target_role,
        pooled_auc=attack_result["pooled_auc"],
        macro_auc=attack_result["macro_auc"],
        target_accuracy=target_accuracy,
        aop=aop(target_accuracy, attack_result["pooled_auc"]),
        per_class_auc=attack_result["per_class_auc"],
    )
