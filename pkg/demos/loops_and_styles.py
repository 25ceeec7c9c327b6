"""
Reading structure out of a coupling profile
===========================================

Pathways and feedback loops of the bundled three-sector profile decide its
style labels.  A what-if edit at the end shows how one coupling moves them.
"""

# %%
import scl

ex = scl.load_worked_example()
profile = ex.profile
labels = profile.registry.labels

# %%
# Strong pathways at each level.  Level 0 is dominated by the direct
# perception-to-planning link; level 1 routes through reflection.
for level in (0, 1):
    print(f"level {level}:")
    for path in scl.trace_pathways(profile, level, theta=0.5)[:3]:
        print("   " + " -> ".join(path.sectors(labels)), f"({path.weight_product:.2f})")

# %%
# Feedback loops above a threshold of 0.3.  Every loop gain is below 1 here,
# so none of them can sustain activity on its own.
for loop in scl.find_loops(profile.restrict([1]), theta=0.3).loops:
    print(" ; ".join(step.describe(labels) for step in loop.cycle.steps), f"-> {loop.classification}")

# %%
# Style labels come with the couplings that triggered them.
for level in (0, 1):
    report = scl.classify_style(profile.restrict([level]))
    for ev in report.evidence:
        print(f"level {level} {ev.rule}: " + ", ".join(f"{e}={v:g}" for e, v in zip(ev.entries, ev.values)))

# %%
# What if reflection fed back onto itself more strongly?  Raising its level-1
# self-coupling to 0.7 pushes growth past 1 under the default decay of 0.5.
edited, distance = scl.perturb_profile(profile, [("refl", "refl", 1, 0.7)])
print(f"\nedit distance {distance:g}; new labels:", scl.classify_style(edited).labels)

# %%
# The influence graph can be exported for Graphviz.
print(scl.to_dot(scl.influence_graph(profile, 1, theta=0.3)))
