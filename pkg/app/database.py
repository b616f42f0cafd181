import os

from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker, declarative_base

DATA_DIR = os.environ.get("TCL_DATA_DIR", "./data")
SQLALCHEMY_DATABASE_URL = os.environ.get("TCL_DB_URL", f"sqlite:///{os.path.join(DATA_DIR, 'runs.db')}")

engine = create_engine(
    SQLALCHEMY_DATABASE_URL, connect_args={"check_same_thread": False}
)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()


def init_db(bind=None):
    """Create the registry tables on first use."""
    bind = bind or engine
    if bind.url.drivername.startswith("sqlite") and bind.url.database not in (None, "", ":memory:"):
        if not bind.url.database.startswith("file:"):
            os.makedirs(os.path.dirname(os.path.abspath(bind.url.database)), exist_ok=True)
    Base.metadata.create_all(bind=bind)


def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
