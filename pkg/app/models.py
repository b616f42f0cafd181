from sqlalchemy import Column, Integer, String, Float, DateTime
from datetime import datetime
from slugify import slugify

from .database import Base


# --- MODELOS ---

class Run(Base):
    """One training run in the registry. Harness commands group runs into cells."""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    config_hash = Column(String, index=True)
    group = Column(String, index=True, default="train")   # train | ablate | sweep | leave-one-out
    cell = Column(String, default="")
    slug = Column(String, index=True)
    suite = Column(String)
    variant = Column(String)
    target = Column(String, default="")
    seed = Column(Integer)
    lam = Column(Float)
    out_dir = Column(String)
    status = Column(String, default="running")           # running | done | failed
    target_accuracy = Column(Float, nullable=True)
    class_mean_accuracy = Column(Float, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    def __init__(self, **kwargs):
        if 'slug' not in kwargs:
            kwargs['slug'] = slugify(f"{kwargs.get('cell') or kwargs.get('variant', '')}-seed-{kwargs.get('seed', 0)}")
        super().__init__(**kwargs)

    def finish(self, target_accuracy: float, class_mean_accuracy: float):
        self.status = "done"
        self.target_accuracy = target_accuracy
        self.class_mean_accuracy = class_mean_accuracy
        self.finished_at = datetime.utcnow()

    def fail(self):
        self.status = "failed"
        self.finished_at = datetime.utcnow()
