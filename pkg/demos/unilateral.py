"""Push and pull cases of the 1-D ball: why smoothed gains can ask to pull."""
from csc import unilateral_demo

rep = unilateral_demo(kappa=160.0)
print(rep.table())
print()
print("The smoothed model believes a retraction drags the ball back "
      f"({rep.pull.predicted_object_motion:+.5f} m); the exact plant leaves it where it is "
      f"({rep.pull.exact_object_motion:+.5f} m).")
print("demo", "passed" if rep.passed else "FAILED")
