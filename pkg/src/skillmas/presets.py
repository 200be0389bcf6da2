"""Built-in reference scenarios.

Each preset is a complete scenario document; the CLI accepts them as
`preset:<name>` wherever a scenario path is expected.  `favorable` rewards
skill discovery under a stable organization, `mismatch` forces coupled
growth and restructuring through tight executor capacities, `hostile` has
nothing to discover and no structural mismatch, `calibration` pins every
phase at a known success probability, and `tiny` is a fast smoke world.
"""

from __future__ import annotations

from .store import ScenarioPack, parse_scenario

FAVORABLE = """\
# Discoverable-procedure world: hard phases hide high-effect procedures.
[tasks]
examine  = search manipulate | 1.0
relocate = search place | 1.0

[difficulty]
examine/search     = -1.2
examine/manipulate = 1.0
relocate/search    = -0.8
relocate/place     = 0.8

[latent]
ls-exam-scan   = examine/search 2.6 missing-precondition
ls-exam-handle = examine/manipulate 1.8 wrong-action-order
ls-rel-track   = relocate/search 2.4 misleading-retrieval
ls-rel-put     = relocate/place 1.8 missing-precondition

[penalties]
interference     = 0.3
overload         = 0.4
routing-noise    = 0.1
cause-confidence = 0.9

[seed-state]
executor manager  = * capacity=10 manager
executor worker-a = examine/search,examine/manipulate,relocate/search,relocate/place capacity=6
skill sk-probe  = owner=worker-a applies=examine/search,relocate/search steps=go,look checks=saw
skill sk-handle = owner=worker-a applies=examine/manipulate,relocate/place steps=grab,put checks=done
card pc-exam-scan = examine missing-precondition add-guard ls-exam-scan

[thresholds]
episodes-per-round = 40
"""

MISMATCH = """\
# Overload-prone world: tight capacities plus a per-family latent catalog
# force skill growth and restructuring to happen together.  Every discovered
# procedure is family-specific, so the library must outgrow the seed
# capacities before the task mix is covered.
[tasks]
examine = handle | 1.0
clean   = handle | 1.0
heat    = handle | 1.0
cool    = handle | 1.0
slice   = handle | 1.0
weigh   = handle | 1.0

[difficulty]
examine/handle = -1.1
clean/handle   = -1.1
heat/handle    = -1.1
cool/handle    = -1.1
slice/handle   = -1.1
weigh/handle   = -1.1

[latent]
ls-exam  = examine/handle 2.4 missing-precondition
ls-clean = clean/handle 2.4 misleading-retrieval
ls-heat  = heat/handle 2.4 wrong-action-order
ls-cool  = cool/handle 2.4 missing-precondition
ls-slice = slice/handle 2.4 wrong-action-order
ls-weigh = weigh/handle 2.4 missing-precondition

[penalties]
interference     = 0.25
overload         = 0.6
routing-noise    = 0.1
cause-confidence = 0.9

[seed-state]
executor manager  = * capacity=1 manager
executor worker-a = examine/handle,clean/handle,heat/handle,cool/handle,slice/handle,weigh/handle capacity=3

[thresholds]
episodes-per-round = 40
"""

HOSTILE = """\
# Static world: nothing to discover, nothing mismatched; every round keeps.
[tasks]
sort = scan place | 1.0

[difficulty]
sort/scan  = 0.8
sort/place = 0.4

[penalties]
interference     = 0.0
overload         = 0.0
routing-noise    = 0.1
cause-confidence = 0.9

[seed-state]
executor manager  = * capacity=8 manager
executor worker-a = sort/scan,sort/place capacity=8
skill sk-scan  = owner=worker-a applies=sort/scan steps=look,note checks=seen
skill sk-place = owner=worker-a applies=sort/place steps=lift,drop checks=ok

[thresholds]
episodes-per-round = 40
"""

# logit(0.8) pins each phase at success probability 0.8.
CALIBRATION = """\
# Known-probability world for rate calibration.
[tasks]
probe = alpha beta | 1.0

[difficulty]
probe/alpha = 1.38629436112
probe/beta  = 1.38629436112

[penalties]
interference     = 0.0
overload         = 0.0
routing-noise    = 0.0
cause-confidence = 1.0

[seed-state]
executor manager = * capacity=8 manager

[thresholds]
episodes-per-round = 40
"""

TINY = """\
# Small fast world for smoke runs.
[tasks]
fetch = find carry | 1.0

[difficulty]
fetch/find  = -0.8
fetch/carry = 1.0

[latent]
ls-fetch-find = fetch/find 2.2 missing-precondition

[penalties]
interference     = 0.2
overload         = 0.3
routing-noise    = 0.1
cause-confidence = 0.9

[seed-state]
executor manager  = * capacity=6 manager
executor worker-a = fetch/find,fetch/carry capacity=4
skill sk-fetch = owner=worker-a applies=fetch/find,fetch/carry steps=walk,hold checks=held

[thresholds]
episodes-per-round = 12
"""

PRESETS: dict[str, str] = {
    "favorable": FAVORABLE,
    "mismatch": MISMATCH,
    "hostile": HOSTILE,
    "calibration": CALIBRATION,
    "tiny": TINY,
}


def load_preset(name: str) -> ScenarioPack:
    if name not in PRESETS:
        known = ", ".join(sorted(PRESETS))
        raise KeyError(f"unknown preset {name!r}; available: {known}")
    return parse_scenario(PRESETS[name], name=name)
