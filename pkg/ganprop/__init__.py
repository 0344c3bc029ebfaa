import os

from dotenv import load_dotenv
from flask import Flask
from flask_limiter import Limiter
from flask_limiter.util import get_remote_address

from ganprop.utils import QueryCounter

# Limiter storage: in-process by default, any flask-limiter URI (redis://...) otherwise
storage_uri = os.environ.get("GANPROP_LIMITER_STORAGE", "memory://")

limiter = Limiter(
    key_func=get_remote_address,
    storage_uri=storage_uri,
    default_limits=[]
)


def create_app(target=None):
    """
    Query server for one target generator. ``target`` is a BlackBoxGenerator or the
    directory of a saved TrainedGan; without it GANPROP_TARGET_DIR is used. Only
    the generator half is ever loaded.
    """
    load_dotenv()

    from ganprop.gan_engine import BlackBoxGenerator

    application = Flask(__name__)
    limiter.init_app(application)

    if target is None and os.environ.get('GANPROP_TARGET_DIR'):
        target = os.environ['GANPROP_TARGET_DIR']
    if isinstance(target, (str, os.PathLike)):
        target = BlackBoxGenerator.load(target)

    if target is None:
        print("⚠️ No target generator loaded. Query routes will answer 404.")
    else:
        print(f"✅ Serving generator {target.model_id or '<unnamed>'} (latent dim {target.latent_dim})")

    application.target_generator = target
    application.query_counter = QueryCounter()

    from .routes import query_blueprint
    application.register_blueprint(query_blueprint)

    return application
