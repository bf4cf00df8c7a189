"""
app/workers/__init__.py

Workers package: units of work that run in isolation.

  - sweep_worker.py: executes one (method, hyper, seed) run of a sweep,
    writes its trajectory and returns report rows. A failing run turns into
    ``status=failed`` rows instead of an exception.
"""
