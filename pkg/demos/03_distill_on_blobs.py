"""
Teacher, bags and a distilled student on Gaussian blobs
=======================================================

A reduced version of the desk comparison: one seed, fewer rows and epochs.
Prints 10-NN accuracy, bag distance and held-out intra-class distance for
the teacher and for three students.
"""

from dataclasses import replace

from bingo.desk import DeskSetup, run_desk

setup = replace(DeskSetup(), n=2000, teacher_epochs=30, student_epochs=5)
run = run_desk(setup, seed=0, arms=("no-distill", "intra", "bingo"))

print(f"bag purity {run.bag_purity:.3f}")
rows = [("teacher", run.teacher)] + list(run.arms.items())
for name, r in rows:
    print(f"{name:12s} knn={r.knn:.4f} bagdis={r.bagdis:.4f} icd={r.icd:.4f} ({r.seconds:.0f}s)")
