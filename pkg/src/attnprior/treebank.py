"""Bracketed constituency trees and referring-expression extraction.

Trees arrive as Penn-style bracketed text, one tree per line in dataset
files, e.g. ``(NP (DT the) (JJ white) (NN car))``. Referring expressions
are the NP/WHNP subtree spans; they anchor word-region grounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field


DEFAULT_RE_TAGS = ("NP", "WHNP")


class TreeParseError(ValueError):
    """Malformed bracketed tree; ``offset`` is the character position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass
class ParseNode:
    """One constituent. Leaves carry a token, internal nodes carry children.

    ``span`` is the inclusive (start, end) pair over leaf token indices.
    """

    label: str
    children: list["ParseNode"] = field(default_factory=list)
    token: str | None = None
    span: tuple[int, int] = (0, 0)

    @property
    def is_leaf(self):
        return self.token is not None

    def leaves(self):
        """Tokens in left-to-right order."""
        if self.is_leaf:
            return [self.token]
        out = []
        for child in self.children:
            out.extend(child.leaves())
        return out

    def iter_nodes(self):
        """Pre-order traversal over all nodes, self included."""
        yield self
        for child in self.children:
            yield from child.iter_nodes()

    def to_bracketed(self):
        if self.is_leaf:
            return f"({self.label} {self.token})"
        inner = " ".join(child.to_bracketed() for child in self.children)
        return f"({self.label} {inner})"

    def __eq__(self, other):
        if not isinstance(other, ParseNode):
            return NotImplemented
        return (
            self.label == other.label
            and self.token == other.token
            and self.children == other.children
        )


@dataclass(frozen=True)
class ReferringExpression:
    """An NP/WHNP span: inclusive token indices plus the covered tokens."""

    start: int
    end: int
    tokens: tuple[str, ...]
    tag: str

    def __post_init__(self):
        if not (0 <= self.start <= self.end):
            raise ValueError(f"bad RE span [{self.start}, {self.end}]")
        if len(self.tokens) != self.end - self.start + 1:
            raise ValueError("RE token count does not match span length")

    @property
    def length(self):
        return self.end - self.start + 1

    def contains(self, index):
        return self.start <= index <= self.end


def parse_bracketed(text: str) -> ParseNode:
    """Parse one bracketed tree; assigns leaf-order spans to every node.

    Raises TreeParseError naming the character offset on unbalanced
    parentheses, empty nodes, or label-less nodes.
    """
    pos = 0
    n = len(text)

    def skip_ws(i):
        while i < n and text[i].isspace():
            i += 1
        return i

    def read_atom(i):
        j = i
        while j < n and not text[j].isspace() and text[j] not in "()":
            j += 1
        return text[i:j], j

    def parse_node(i):
        i = skip_ws(i)
        if i >= n:
            raise TreeParseError("unexpected end of input", i)
        if text[i] != "(":
            raise TreeParseError(f"expected '(' but found {text[i]!r}", i)
        open_at = i
        i = skip_ws(i + 1)
        label, i = read_atom(i)
        if not label:
            raise TreeParseError("node without a label", open_at)
        node = ParseNode(label=label)
        while True:
            i = skip_ws(i)
            if i >= n:
                raise TreeParseError("unexpected end of input", i)
            if text[i] == ")":
                if not node.children and node.token is None:
                    raise TreeParseError("empty node", open_at)
                return node, i + 1
            if text[i] == "(":
                if node.token is not None:
                    raise TreeParseError("leaf node with children", i)
                child, i = parse_node(i)
                node.children.append(child)
            else:
                token, i = read_atom(i)
                if node.children or node.token is not None:
                    raise TreeParseError("node mixes tokens and children", i - len(token))
                node.token = token

    root, pos = parse_node(0)
    pos = skip_ws(pos)
    if pos != n:
        raise TreeParseError("trailing content after tree", pos)
    _assign_spans(root, 0)
    return root


def _assign_spans(node, next_index):
    """DFS numbering of leaves; internal spans cover their children."""
    if node.is_leaf:
        node.span = (next_index, next_index)
        return next_index + 1
    for child in node.children:
        next_index = _assign_spans(child, next_index)
    node.span = (node.children[0].span[0], node.children[-1].span[1])
    return next_index


def extract_referring_expressions(tree, tags=DEFAULT_RE_TAGS):
    """All NP/WHNP subtree spans, ordered by (start, end), deduplicated.

    Nested spans are all kept; identical spans from unary chains collapse
    to a single RE (the outermost node's tag wins).
    """
    tagset = set(tags)
    seen = {}
    for node in tree.iter_nodes():
        if node.label in tagset and node.span not in seen:
            seen[node.span] = ReferringExpression(
                start=node.span[0],
                end=node.span[1],
                tokens=tuple(node.leaves()),
                tag=node.label,
            )
    return [seen[span] for span in sorted(seen)]


def re_coverage(res, num_tokens):
    """count[i] = number of REs whose span contains token i."""
    counts = [0] * num_tokens
    for re_ in res:
        if re_.start < 0 or re_.end >= num_tokens:
            raise ValueError(
                f"RE span [{re_.start}, {re_.end}] out of range for {num_tokens} tokens"
            )
        for i in range(re_.start, re_.end + 1):
            counts[i] += 1
    return counts
