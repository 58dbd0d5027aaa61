"""Experiment variants: which modalities each one consumes and which alignment edges it trains."""

from dataclasses import dataclass

from src.data_model import TabularSchema
from src.errors import ConfigError, VariantStageError


@dataclass(frozen=True)
class Variant:
    """
    One row of the modality comparison.

    ``input_modality`` is what Stage III reads; ``edges`` are the Stage-II
    alignment terms (empty for supervised baselines).
    """

    name: str
    input_modality: str
    edges: tuple[str, ...] = ()
    inject_phenotypes: bool = False

    @property
    def is_supervised(self) -> bool:
        return not self.edges

    @property
    def modalities(self) -> tuple[str, ...]:
        """Every modality the variant consumes across all stages."""
        if self.is_supervised:
            return (self.input_modality,)
        partners = tuple({"LE": "E", "LT": "T"}[e] for e in self.edges)
        return ("L",) + partners

    @property
    def pretrain_modalities(self) -> tuple[str, ...]:
        """Modalities with a Stage-I encoder; supervised baselines start from random weights."""
        return () if self.is_supervised else self.modalities

    def schema(self, base: TabularSchema) -> TabularSchema:
        return base.with_injected_phenotypes(self.inject_phenotypes)

    def require_alignment(self) -> None:
        if self.is_supervised:
            raise VariantStageError(f"variant has no alignment stage ({self.name})")

    def require_pretraining(self, modality: str) -> None:
        if self.is_supervised:
            raise VariantStageError(f"variant has no pretraining stage ({self.name})")
        if modality not in self.pretrain_modalities:
            raise VariantStageError(f"variant {self.name} does not use modality {modality!r}")


VARIANTS: dict[str, Variant] = {
    v.name: v
    for v in (
        Variant("CMR_sup", "C"),
        Variant("L_sup", "L"),
        Variant("E_sup", "E"),
        Variant("T_sup", "T"),
        Variant("L+T", "L", ("LT",)),
        Variant("L+E", "L", ("LE",)),
        Variant("L+E+T_p", "L", ("LE", "LT"), inject_phenotypes=True),
        Variant("C-TRIP", "L", ("LE", "LT")),
    )
}


def get_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from None
