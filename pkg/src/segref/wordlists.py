"""Bundled English word lists backing the heuristic noun-phrase chunker.

The chunker needs three token classes: determiners (kept as phrase prefixes),
function words (phrase breakers), and common caption verbs (also breakers).
The verb list is intentionally conservative: words that frequently act as
nouns in scene descriptions ("top", "look", "light", "smile") are excluded so
they survive inside phrases.
"""

from __future__ import annotations

DETERMINERS = frozenset(
    """
    a an the this that these those my your his her its our their
    some any each every no both all several many few most other another
    one two three four five six seven eight nine ten
    """.split()
)

FUNCTION_WORDS = frozenset(
    """
    of in on at by for with from to into onto over under above below near
    between behind beside besides around against along across through
    throughout during without within upon off out up down toward towards
    amid among beneath underneath atop via per
    and or but nor so yet while when where if because although though unless
    since whether as than then
    it they them he she we you i me him us who whom whose which what there
    here itself themselves
    is are was were be been being am do does did done has have had having
    can could will would shall should may might must
    not also very too quite rather just only even still about almost perhaps
    """.split()
)

# Content verbs that show up in generated image descriptions. Regular
# inflections are derived below; irregular forms are listed explicitly.
_VERB_BASES = (
    "show depict display capture portray illustrate feature contain include "
    "sit stand hang rest lean lie appear seem hold carry wear eat drink walk "
    "run fly ride drive place position surround fill cover adorn decorate "
    "serve pour suggest indicate create convey evoke exude extend stretch "
    "overlook dominate occupy emphasize highlight add give take make bring "
    "enjoy relax gaze observe notice pass move travel roll"
).split()

_IRREGULAR_FORMS = frozenset(
    """
    sat sitting stood standing hung held holding wore worn ate eaten drank
    drunk ran running flew flown rode ridden drove driven lay lain lying
    gave given took taken made brought
    """.split()
)


def _inflections(base: str) -> set[str]:
    forms = {base}
    if base.endswith("y") and len(base) > 2 and base[-2] not in "aeiou":
        forms.add(base[:-1] + "ies")
    elif base.endswith(("s", "x", "z", "ch", "sh")):
        forms.add(base + "es")
    else:
        forms.add(base + "s")
    if base.endswith("e"):
        forms.add(base[:-1] + "ing")
        forms.add(base + "d")
    else:
        forms.add(base + "ing")
        forms.add(base + "ed")
    return forms


VERB_FORMS = frozenset(
    form for base in _VERB_BASES for form in _inflections(base)
) | _IRREGULAR_FORMS
