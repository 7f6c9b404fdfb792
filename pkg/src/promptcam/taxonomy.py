"""Three-level taxonomy (family -> genus -> species) and group relabelling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEVELS = ("family", "genus", "species")


@dataclass
class TaxonNode:
    name: str
    level: str
    parent: str | None = None
    children: list[str] = field(default_factory=list)
    species_id: int | None = None  # leaves only


@dataclass
class TaxonomyTree:
    nodes: dict[str, TaxonNode]
    root: str

    @classmethod
    def from_genera(cls, genus_of_species: list[int], family: str = "family") -> "TaxonomyTree":
        """Build a tree from ``genus_of_species[c] = genus index``."""
        nodes = {family: TaxonNode(family, "family")}
        for g in sorted(set(genus_of_species)):
            name = f"genus{g}"
            nodes[name] = TaxonNode(name, "genus", parent=family)
            nodes[family].children.append(name)
        for c, g in enumerate(genus_of_species):
            name = f"species{c}"
            nodes[name] = TaxonNode(name, "species", parent=f"genus{g}", species_id=c)
            nodes[f"genus{g}"].children.append(name)
        tree = cls(nodes, family)
        tree.validate()
        return tree

    def validate(self) -> None:
        for node in self.nodes.values():
            if node.level not in LEVELS:
                raise ValueError(f"unknown level {node.level!r} at {node.name}")
            if node.level == "species":
                if node.children:
                    raise ValueError(f"species {node.name} has children")
                chain = [a.level for a in self.ancestors(node.name)]
                if chain != ["genus", "family"]:
                    raise ValueError(f"species {node.name} ancestry {chain} is not genus->family")

    def ancestors(self, name: str) -> list[TaxonNode]:
        out = []
        node = self.nodes[name]
        while node.parent is not None:
            node = self.nodes[node.parent]
            out.append(node)
        return out

    def species_under(self, name: str) -> list[int]:
        node = self.nodes[name]
        if node.level == "species":
            return [node.species_id]
        return sorted(s for ch in node.children for s in self.species_under(ch))

    def group_labels(self, name: str) -> dict[int, int]:
        """``species id -> index of the child group`` for an internal node."""
        node = self.nodes[name]
        if len(node.children) < 2:
            raise ValueError(f"node {name!r} ({node.level}) needs >= 2 children to relabel")
        return {s: k for k, ch in enumerate(node.children) for s in self.species_under(ch)}

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "nodes": [
                {"name": n.name, "level": n.level, "parent": n.parent, "children": n.children,
                 "species_id": n.species_id}
                for n in self.nodes.values()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaxonomyTree":
        nodes = {n["name"]: TaxonNode(n["name"], n["level"], n["parent"], list(n["children"]), n["species_id"])
                 for n in d["nodes"]}
        return cls(nodes, d["root"])


def relabel_taxonomy(dataset, tree: TaxonomyTree, node: str):
    """Keep images of species under ``node`` and label them by child group.

    The derived dataset has one class per child of ``node``.
    """
    mapping = tree.group_labels(node)
    keep = np.array([int(y) in mapping for y in dataset.labels], dtype=bool)
    sub = dataset.subset(np.flatnonzero(keep))
    sub.labels = np.array([mapping[int(y)] for y in sub.labels], dtype=np.int64)
    sub.num_classes = len(tree.nodes[node].children)
    return sub
