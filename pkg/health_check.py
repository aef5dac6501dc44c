"""Health and status endpoints for monitoring long odometry and training runs."""

import os
from datetime import datetime

from flask import Flask, jsonify

from config import Config

app = Flask(__name__)


def _unhealthy(message: str):
    return jsonify({
        "status": "unhealthy",
        "message": message,
        "timestamp": datetime.now().isoformat()
    }), 500


@app.route('/health')
def health_check():
    """Health check endpoint."""
    try:
        run_dir = Config.OUTPUT_PATH
        if not os.path.isdir(run_dir):
            return _unhealthy("Run directory not found")

        if not os.path.exists(os.path.join(run_dir, "manifest.json")):
            return _unhealthy("Run manifest not found")

        return jsonify({
            "status": "healthy",
            "message": "Run outputs present",
            "timestamp": datetime.now().isoformat(),
            "run_dir": run_dir
        })

    except Exception as e:
        return _unhealthy(f"Health check failed: {str(e)}")


@app.route('/status')
def status():
    """Latest manifest, recent loss-curve rows and metrics of the run."""
    try:
        from storage import RunStorage

        run = RunStorage(Config.OUTPUT_PATH)
        losses = run.read_loss_curve()

        return jsonify({
            "status": "healthy",
            "timestamp": datetime.now().isoformat(),
            "manifest": run.read_manifest(),
            "training": {
                "epochs_logged": len(losses),
                "recent_losses": losses[-5:],
                "latest_checkpoint": str(run.latest_checkpoint() or "")
            },
            "metrics": run.load_metrics(),
            "diagnostics_count": len(run.read_diagnostics())
        })

    except Exception as e:
        return jsonify({
            "status": "error",
            "message": f"Status check failed: {str(e)}",
            "timestamp": datetime.now().isoformat()
        }), 500


if __name__ == '__main__':
    app.run(host='0.0.0.0', port=8000, debug=False)
