"""python main.py {train,evaluate,sweep,simulate,check} [flags]; see app.py."""

if __name__ == '__main__':
    from app import run_app

    run_app()
